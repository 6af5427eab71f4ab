//! Independent reference implementations used as test oracles. Nothing here
//! calls the library's factorizations or kernels.
#![allow(dead_code)]

use std::f64::consts::PI;

use loogp::{Hyperparams, KernelKind, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const JITTER: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(r: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(n, d, |_, _| r.random_range(lo..hi))
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

pub fn random_hp(r: &mut ChaCha8Rng, d: usize) -> Hyperparams {
    Hyperparams {
        log_lengthscales: (0..d).map(|_| r.random_range(-0.7..0.7)).collect(),
        log_kernel_scale: r.random_range(-0.5..0.5),
        log_obs_noise: r.random_range(-2.0..-0.5),
        mean_const: r.random_range(-0.5..0.5),
    }
}

pub fn random_kind(r: &mut ChaCha8Rng) -> KernelKind {
    if r.random_bool(0.5) {
        KernelKind::Rbf
    } else {
        KernelKind::Matern52
    }
}

// ---------- kernels ----------

pub fn scaled_dist(x: &[f64], z: &[f64], hp: &Hyperparams) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let rho = hp.log_lengthscales[i].exp();
        s += ((x[i] - z[i]) / rho).powi(2);
    }
    s.sqrt()
}

pub fn rbf(d: f64, sk: f64) -> f64 {
    sk * sk * (-0.5 * d * d).exp()
}

pub fn matern52(d: f64, sk: f64) -> f64 {
    let a = 5f64.sqrt() * d;
    sk * sk * (1.0 + a + a * a / 3.0) * (-a).exp()
}

pub fn kernel(x: &[f64], z: &[f64], hp: &Hyperparams, kind: KernelKind) -> f64 {
    let d = scaled_dist(x, z, hp);
    let sk = hp.log_kernel_scale.exp();
    match kind {
        KernelKind::Rbf => rbf(d, sk),
        KernelKind::Matern52 => matern52(d, sk),
    }
}

/// Kernel matrix with the library's jitter convention on the diagonal
/// (the jittered kernel is the model's prior covariance).
pub fn jittered_gram(x: &[Vec<f64>], hp: &Hyperparams, kind: KernelKind) -> Vec<Vec<f64>> {
    let n = x.len();
    let j = JITTER * (2.0 * hp.log_kernel_scale).exp();
    let mut k = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            k[a][b] = kernel(&x[a], &x[b], hp, kind);
        }
        k[a][a] += j;
    }
    k
}

pub fn rows(x: &Matrix) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|i| x.row(i).to_vec()).collect()
}

// ---------- dense linear algebra ----------

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        assert!(piv.abs() > 0.0, "singular matrix");
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for j in 0..2 * n {
                        m[r][j] -= f * m[c][j];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// log|det A| by LU with partial pivoting.
pub fn log_abs_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut ld = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        ld += piv.abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / piv;
            for j in c..n {
                m[r][j] -= f * m[c][j];
            }
        }
    }
    ld
}

pub fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mvn_logpdf(r: &[f64], cov: &[Vec<f64>]) -> f64 {
    let inv = inverse(cov);
    let n = r.len() as f64;
    -0.5 * dot(r, &matvec(&inv, r)) - 0.5 * log_abs_det(cov) - 0.5 * n * (2.0 * PI).ln()
}

pub fn normal_logpdf(y: f64, m: f64, v: f64) -> f64 {
    -0.5 * (2.0 * PI * v).ln() - 0.5 * (y - m) * (y - m) / v
}

// ---------- dense GP ----------

/// `(mean, var_latent)` at `xs` given `(x, y)` with per-point noise.
pub fn dense_predict(
    xs: &[f64],
    x: &[Vec<f64>],
    y: &[f64],
    noise: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    mean_const: f64,
) -> (f64, f64) {
    let prior = (2.0 * hp.log_kernel_scale).exp() * (1.0 + JITTER);
    if x.is_empty() {
        return (mean_const, prior);
    }
    let mut a = jittered_gram(x, hp, kind);
    for i in 0..x.len() {
        a[i][i] += noise[i];
    }
    let inv = inverse(&a);
    let kv: Vec<f64> = x.iter().map(|r| kernel(xs, r, hp, kind)).collect();
    let r: Vec<f64> = y.iter().map(|v| v - mean_const).collect();
    let mean = mean_const + dot(&kv, &matvec(&inv, &r));
    let var = prior - dot(&kv, &matvec(&inv, &kv));
    (mean, var)
}

pub fn dense_mll(x: &[Vec<f64>], y: &[f64], hp: &Hyperparams, kind: KernelKind) -> f64 {
    let mut a = jittered_gram(x, hp, kind);
    let s2 = (2.0 * hp.log_obs_noise).exp();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += s2;
    }
    let r: Vec<f64> = y.iter().map(|v| v - hp.mean_const).collect();
    mvn_logpdf(&r, &a)
}

/// Log density of `y[n]` conditioned on the points `cond`.
pub fn dense_conditional(
    x: &[Vec<f64>],
    y: &[f64],
    n: usize,
    cond: &[usize],
    hp: &Hyperparams,
    kind: KernelKind,
) -> f64 {
    let s2 = (2.0 * hp.log_obs_noise).exp();
    let xc: Vec<Vec<f64>> = cond.iter().map(|&j| x[j].clone()).collect();
    let yc: Vec<f64> = cond.iter().map(|&j| y[j]).collect();
    let (m, v) = dense_predict(&x[n], &xc, &yc, &vec![s2; cond.len()], hp, kind, hp.mean_const);
    normal_logpdf(y[n], m, v + s2)
}

/// Untruncated leave-one-out objective by `N` dense solves.
pub fn dense_loo(x: &[Vec<f64>], y: &[f64], hp: &Hyperparams, kind: KernelKind) -> f64 {
    let n = x.len();
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            dense_conditional(x, y, i, &others, hp, kind)
        })
        .sum::<f64>()
        / n as f64
}

// ---------- neighbors ----------

/// The `k` nearest rows of `x` to `q` by scaled distance, ties by index,
/// skipping `exclude`.
pub fn brute_knn(x: &[Vec<f64>], q: &[f64], log_ls: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = x
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, r)| {
            let s: f64 = r
                .iter()
                .zip(q)
                .zip(log_ls)
                .map(|((a, b), l)| ((a - b) / l.exp()).powi(2))
                .sum();
            (s, i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|p| p.1).collect()
}

// ---------- Pólya-Gamma ----------

/// PG(1,0) density by direct summation of the alternating series.
pub fn pg_density(w: f64, terms: usize) -> f64 {
    let mut s = 0.0;
    for n in 0..terms {
        let a = (2 * n + 1) as f64;
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        s += sign * a * (-a * a / (8.0 * w)).exp();
    }
    s / (2.0 * PI * w.powi(3)).sqrt()
}

pub fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        s += f(lo + i as f64 * h);
    }
    s * h
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------- finite differences ----------

pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, p: &[f64], i: usize, h: f64) -> f64 {
    let mut a = p.to_vec();
    let mut b = p.to_vec();
    a[i] += h;
    b[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero components.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error between `grad` and central differences of `f`.
pub fn max_grad_error(mut f: impl FnMut(&[f64]) -> f64, p: &[f64], grad: &[f64], h: f64, floor: f64) -> f64 {
    (0..p.len())
        .map(|i| rel_err(grad[i], central_diff(&mut f, p, i, h), floor))
        .fold(0.0, f64::max)
}

// ---------- classification ----------

/// Conditional of a PG-augmented site by the explicit matrix formula
/// `μ = ½ kᵀ(K̃ + Ω⁻¹)⁻¹ Ω⁻¹ y`, `σ² = k̃(x, x) − kᵀ(K̃ + Ω⁻¹)⁻¹ k`.
pub fn pg_conditional(
    xs: &[f64],
    x_nb: &[Vec<f64>],
    y_nb: &[f64],
    omega: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
) -> (f64, f64) {
    let prior = (2.0 * hp.log_kernel_scale).exp() * (1.0 + JITTER);
    if x_nb.is_empty() {
        return (0.0, prior);
    }
    let mut a = jittered_gram(x_nb, hp, kind);
    for i in 0..a.len() {
        a[i][i] += 1.0 / omega[i];
    }
    let inv = inverse(&a);
    let k: Vec<f64> = x_nb.iter().map(|r| kernel(xs, r, hp, kind)).collect();
    let oy: Vec<f64> = y_nb.iter().zip(omega).map(|(y, w)| y / w).collect();
    let ik = matvec(&inv, &k);
    (0.5 * dot(&ik, &oy), prior - dot(&k, &ik))
}

/// `E[sigmoid(y f)]` for `f ~ N(mu, var)` by trapezoid integration.
pub fn logistic_gauss(y: f64, mu: f64, var: f64) -> f64 {
    let s = var.sqrt();
    trapezoid(
        |f| sigmoid(y * f) * (-(f - mu).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt(),
        mu - 12.0 * s,
        mu + 12.0 * s,
        20_000,
    )
}

// ---------- sampling ----------

/// Lower Cholesky factor by the textbook recurrence.
pub fn cholesky_lower(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Draw of `y = mean + f + ε` with `f ~ GP(0, k)` and `ε ~ N(0, σ_obs²)`.
pub fn sample_gp(r: &mut ChaCha8Rng, x: &[Vec<f64>], hp: &Hyperparams, kind: KernelKind) -> Vec<f64> {
    let l = cholesky_lower(&jittered_gram(x, hp, kind));
    let z = normal_vec(r, x.len());
    let so = hp.log_obs_noise.exp();
    (0..x.len())
        .map(|i| hp.mean_const + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>() + so * r.sample::<f64, _>(StandardNormal))
        .collect()
}
