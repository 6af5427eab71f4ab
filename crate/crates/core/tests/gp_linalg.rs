mod common;

use common::*;
use loogp::linalg::{chol_solve, factor_with_jitter};
use loogp::{exact_mll, predictive, DenseGp, Hyperparams, KernelKind, Matrix};

fn random_spd(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let b: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(r, n)).collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = (0..n).map(|k| b[i][k] * b[j][k]).sum::<f64>();
        }
        a[i][i] += n as f64;
    }
    a
}

fn to_matrix(a: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(a).unwrap()
}

#[test]
fn chol_solve_examples() {
    let mut r = rng(1);
    let b = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
    let x = chol_solve(&Matrix::identity(3), &b).unwrap();
    assert_eq!(x, b);

    let x = chol_solve(&Matrix::from_rows(&[vec![4.0]]).unwrap(), &Matrix::column(&[8.0])).unwrap();
    assert_eq!(x[(0, 0)], 2.0);

    let a = random_spd(&mut r, 6);
    let b: Vec<Vec<f64>> = (0..6).map(|_| normal_vec(&mut r, 3)).collect();
    let x = chol_solve(&to_matrix(&a), &to_matrix(&b)).unwrap();
    let inv = inverse(&a);
    for i in 0..6 {
        for j in 0..3 {
            let want: f64 = (0..6).map(|k| inv[i][k] * b[k][j]).sum();
            assert!((x[(i, j)] - want).abs() < 1e-8);
        }
    }
    // residual bound
    let bm = to_matrix(&b);
    let ax = to_matrix(&a).matmul(&x).unwrap();
    let resid = (0..6 * 3).map(|i| (ax.as_slice()[i] - bm.as_slice()[i]).abs()).fold(0.0, f64::max);
    assert!(resid <= 1e-8 * bm.max_abs());
}

#[test]
fn indefinite_input_fails_after_one_escalation() {
    let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    let err = factor_with_jitter(&a, 1e-6).unwrap_err();
    assert!(err.is_numeric());
    match err {
        loogp::GpError::NotPositiveDefinite { jitter, .. } => assert!((jitter - 1e-5).abs() < 1e-20),
        other => panic!("unexpected {other}"),
    }
    assert!(chol_solve(&a, &Matrix::column(&[1.0, 1.0])).is_err());
}

#[test]
fn duplicated_points_factor_under_the_jitter_policy() {
    let x = Matrix::from_rows(&[vec![0.3], vec![0.3], vec![0.3]]).unwrap();
    let hp = Hyperparams {
        log_lengthscales: vec![0.0],
        log_kernel_scale: 0.0,
        log_obs_noise: (1e-8f64).ln(),
        mean_const: 0.0,
    };
    assert!(exact_mll(&x, &[1.0, 1.0, 1.0], &hp, KernelKind::Rbf).unwrap().is_finite());
}

#[test]
fn predictive_with_no_data_is_the_prior() {
    let hp = Hyperparams {
        log_lengthscales: vec![0.1, 0.2],
        log_kernel_scale: 0.3,
        log_obs_noise: -1.0,
        mean_const: 0.7,
    };
    let p = predictive(&[0.1, 0.2], &Matrix::zeros(0, 2), &[], &[], &hp, KernelKind::Matern52).unwrap();
    let sk2 = (0.6f64).exp();
    assert_eq!(p.mean, 0.7);
    // the prior variance includes the diagonal jitter
    assert!((p.var_latent - sk2 * (1.0 + JITTER)).abs() < 1e-15);
    assert!((p.var_observed - p.var_latent - (-2.0f64).exp()).abs() < 1e-15);
}

#[test]
fn predictive_single_point_scalar_algebra() {
    let (sk2, so2, y1) = (1.4f64, 0.09f64, 0.8);
    let hp = Hyperparams {
        log_lengthscales: vec![0.0],
        log_kernel_scale: 0.5 * sk2.ln(),
        log_obs_noise: 0.5 * so2.ln(),
        mean_const: 0.0,
    };
    let x = Matrix::from_rows(&[vec![0.25]]).unwrap();
    let p = predictive(&[0.25], &x, &[y1], &[so2], &hp, KernelKind::Rbf).unwrap();
    // exact scalar algebra with the jittered prior variance s = σ_K²(1 + 1e−6)
    let s = sk2 * (1.0 + JITTER);
    assert!((p.mean - sk2 * y1 / (s + so2)).abs() < 1e-12);
    assert!((p.var_latent - (s - sk2 * sk2 / (s + so2))).abs() < 1e-12);
    // and the jitter-free textbook form to the jitter's order
    assert!((p.mean - sk2 * y1 / (sk2 + so2)).abs() < 1e-5);
    assert!((p.var_latent - sk2 * so2 / (sk2 + so2)).abs() < 1e-5);
}

#[test]
fn predictive_matches_dense_inverse_oracle() {
    let mut r = rng(2);
    for trial in 0..20 {
        let kind = random_kind(&mut r);
        let d = 1 + trial % 3;
        let hp = random_hp(&mut r, d);
        let x = uniform_matrix(&mut r, 5, d, -1.0, 1.0);
        let y = normal_vec(&mut r, 5);
        let noise: Vec<f64> = (0..5).map(|_| r.random_range(0.01..0.5)).collect();
        let xs: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let p = predictive(&xs, &x, &y, &noise, &hp, kind).unwrap();
        let (m, v) = dense_predict(&xs, &rows(&x), &y, &noise, &hp, kind, hp.mean_const);
        assert!((p.mean - m).abs() < 1e-10 * (1.0 + m.abs()), "{} vs {m}", p.mean);
        assert!((p.var_latent - v).abs() < 1e-10, "{} vs {v}", p.var_latent);
        assert!(p.var_observed >= p.var_latent && p.var_latent >= 0.0);
        assert!(p.var_latent <= hp.kernel_var() * (1.0 + JITTER) + 1e-15);
    }
}

use rand::Rng;

#[test]
fn predictive_rejects_bad_inputs() {
    let hp = Hyperparams::new(2);
    let x = Matrix::zeros(2, 2);
    assert!(predictive(&[0.0, 0.0], &x, &[1.0], &[0.1, 0.1], &hp, KernelKind::Rbf).is_err());
    assert!(predictive(&[0.0], &x, &[1.0, 1.0], &[0.1, 0.1], &hp, KernelKind::Rbf).is_err());
    assert!(predictive(&[0.0, 0.0], &x, &[1.0, 1.0], &[0.1, 0.0], &hp, KernelKind::Rbf).is_err());
}

#[test]
fn exact_mll_single_point_at_mean() {
    let hp = Hyperparams {
        log_lengthscales: vec![0.0],
        log_kernel_scale: 0.2,
        log_obs_noise: -1.1,
        mean_const: 0.4,
    };
    let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
    let v = exact_mll(&x, &[0.4], &hp, KernelKind::Matern52).unwrap();
    let var = hp.kernel_var() * (1.0 + JITTER) + hp.noise_var();
    assert!((v + 0.5 * (2.0 * std::f64::consts::PI * var).ln()).abs() < 1e-14);
    assert!(exact_mll(&Matrix::zeros(0, 1), &[], &hp, KernelKind::Rbf).is_err());
}

#[test]
fn exact_mll_matches_dense_and_chain_rule_oracles() {
    let mut r = rng(3);
    for trial in 0..10 {
        let kind = random_kind(&mut r);
        let d = 1 + trial % 3;
        let hp = random_hp(&mut r, d);
        let x = uniform_matrix(&mut r, 8, d, -1.0, 1.0);
        let y = normal_vec(&mut r, 8);
        let v = exact_mll(&x, &y, &hp, kind).unwrap();
        let xr = rows(&x);
        let dense = dense_mll(&xr, &y, &hp, kind);
        assert!((v - dense).abs() < 1e-9 * dense.abs().max(1.0), "{v} vs {dense}");
        let chain: f64 = (0..8)
            .map(|n| dense_conditional(&xr, &y, n, &(0..n).collect::<Vec<_>>(), &hp, kind))
            .sum();
        assert!((v - chain).abs() < 1e-9 * chain.abs().max(1.0), "{v} vs {chain}");
    }
}

#[test]
fn exact_mll_is_permutation_invariant() {
    let mut r = rng(4);
    let hp = random_hp(&mut r, 2);
    let x = uniform_matrix(&mut r, 12, 2, -1.0, 1.0);
    let y = normal_vec(&mut r, 12);
    let base = exact_mll(&x, &y, &hp, KernelKind::Matern52).unwrap();
    for _ in 0..5 {
        let mut perm: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let xp = x.select_rows(&perm);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let v = exact_mll(&xp, &yp, &hp, KernelKind::Matern52).unwrap();
        assert!((v - base).abs() < 1e-9);
    }
}

#[test]
fn variance_shrinks_with_more_conditioning() {
    let mut r = rng(5);
    for kind in [KernelKind::Rbf, KernelKind::Matern52] {
        let hp = random_hp(&mut r, 2);
        let x = uniform_matrix(&mut r, 10, 2, -1.0, 1.0);
        let y = normal_vec(&mut r, 10);
        let xs = [0.1, -0.2];
        let mut prev = f64::INFINITY;
        for m in 0..=10 {
            let idx: Vec<usize> = (0..m).collect();
            let p = predictive(&xs, &x.select_rows(&idx), &y[..m], &vec![hp.noise_var(); m], &hp, kind).unwrap();
            assert!(p.var_latent <= prev + 1e-12);
            assert!(p.var_latent <= hp.kernel_var() * (1.0 + JITTER) + 1e-15);
            prev = p.var_latent;
        }
    }
}

#[test]
fn dense_gp_agrees_with_predictive() {
    let mut r = rng(6);
    let hp = random_hp(&mut r, 3);
    let x = uniform_matrix(&mut r, 20, 3, -1.0, 1.0);
    let y = normal_vec(&mut r, 20);
    let gp = DenseGp::fit(&x, &y, &hp, KernelKind::Matern52).unwrap();
    for _ in 0..5 {
        let xs: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = gp.predict(&xs).unwrap();
        let b = predictive(&xs, &x, &y, &vec![hp.noise_var(); 20], &hp, KernelKind::Matern52).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-10);
        assert!((a.var_observed - b.var_observed).abs() < 1e-10);
    }
}
