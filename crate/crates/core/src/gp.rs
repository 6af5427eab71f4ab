//! Gaussian conditioning: predictive distributions, the exact marginal log
//! likelihood, and the local k-point systems used by every nearest-neighbor
//! objective.
//!
//! Jitter convention: the kernel diagonal carries an extra `1e-6·σ_K²` (one
//! escalation to `1e-5·σ_K²` is allowed), and the prior variance at a target
//! point carries the same amount, so the covariance of every joint and every
//! conditional is taken from the single matrix `K + jitter·I + noise`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::kernels::{Hyperparams, KernelEval, KernelKind};
use crate::linalg::{dot, factor_with_jitter, Cholesky, Matrix, BASE_JITTER};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Predictive distribution at a single input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictive {
    pub mean: f64,
    /// σ_f², variance of the latent function value.
    pub var_latent: f64,
    /// σ_f² + σ_obs².
    pub var_observed: f64,
}

impl GaussianPredictive {
    pub fn log_density(&self, y: f64) -> f64 {
        normal_log_density(y, self.mean, self.var_observed)
    }
}

#[inline]
pub fn normal_log_density(y: f64, mean: f64, var: f64) -> f64 {
    let e = y - mean;
    -0.5 * (LN_2PI + var.ln()) - 0.5 * e * e / var
}

/// Diagonal observation noise on the conditioning set.
#[derive(Clone, Copy, Debug)]
pub(crate) enum NoiseDiag<'a> {
    Constant(f64),
    PerPoint(&'a [f64]),
}

impl NoiseDiag<'_> {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            NoiseDiag::Constant(v) => *v,
            NoiseDiag::PerPoint(v) => v[i],
        }
    }
}

/// The factorized system for one target conditioned on a small set of points:
/// `A = K_cc + jitter·I + diag(noise)` together with the cross-covariances.
pub(crate) struct LocalSystem {
    pub m: usize,
    /// Kernel values among the conditioning points (no noise, no jitter).
    pub kmat: Vec<f64>,
    /// Radial factors among conditioning points (empty unless requested).
    pub radial: Vec<f64>,
    pub kv: Vec<f64>,
    pub gv: Vec<f64>,
    pub chol: Option<Cholesky>,
    pub jitter: f64,
    /// Prior latent variance at the target, σ_K² + jitter.
    pub prior_var: f64,
}

impl LocalSystem {
    pub fn build(
        ke: &KernelEval,
        target: Option<&[f64]>,
        rows: &[&[f64]],
        noise: NoiseDiag<'_>,
        with_radial: bool,
    ) -> Result<Self> {
        let m = rows.len();
        let base_jitter = BASE_JITTER * ke.var;
        let mut kmat = vec![0.0; m * m];
        let mut radial = if with_radial { vec![0.0; m * m] } else { Vec::new() };
        for a in 0..m {
            for b in 0..a {
                let r2 = ke.sq_dist(rows[a], rows[b]);
                let (k, g) = if with_radial {
                    ke.value_and_radial(r2)
                } else {
                    (ke.from_sq_dist(r2), 0.0)
                };
                kmat[a * m + b] = k;
                kmat[b * m + a] = k;
                if with_radial {
                    radial[a * m + b] = g;
                    radial[b * m + a] = g;
                }
            }
            kmat[a * m + a] = ke.var;
        }
        let (mut kv, mut gv) = (Vec::new(), Vec::new());
        if let Some(t) = target {
            kv.reserve(m);
            for r in rows {
                let r2 = ke.sq_dist(t, r);
                if with_radial {
                    let (k, g) = ke.value_and_radial(r2);
                    kv.push(k);
                    gv.push(g);
                } else {
                    kv.push(ke.from_sq_dist(r2));
                }
            }
        }
        let (chol, jitter) = if m == 0 {
            (None, base_jitter)
        } else {
            let mut a = Matrix::from_vec(m, m, kmat.clone())?;
            for i in 0..m {
                a[(i, i)] += noise.at(i);
            }
            let (c, j) = factor_with_jitter(&a, base_jitter)?;
            (Some(c), j)
        };
        Ok(Self {
            m,
            kmat,
            radial,
            kv,
            gv,
            chol,
            jitter,
            prior_var: ke.var + jitter,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        match &self.chol {
            Some(c) => c.solve_vec(b),
            None => Vec::new(),
        }
    }

    /// Latent variance at the target given `beta = A⁻¹ kv`.
    pub fn latent_var(&self, beta: &[f64]) -> f64 {
        (self.prior_var - dot(&self.kv, beta)).max(0.0)
    }

    /// Adds lengthscale gradients of `Σ_ab W_ab A_ab + Σ_a c_a kv_a` to `out`.
    /// `pair(a, b)` must return `W_ab + W_ba` for `a > b`; diagonal entries
    /// do not depend on lengthscales.
    pub fn add_lengthscale_grads(
        &self,
        ke: &KernelEval,
        target: &[f64],
        rows: &[&[f64]],
        pair: impl Fn(usize, usize) -> f64,
        cross: impl Fn(usize) -> f64,
        out: &mut [f64],
    ) {
        let m = self.m;
        for a in 0..m {
            for b in 0..a {
                let w = pair(a, b) * self.radial[a * m + b];
                if w != 0.0 {
                    ke.add_lengthscale_grad(rows[a], rows[b], w, out);
                }
            }
            if !self.gv.is_empty() {
                let c = cross(a) * self.gv[a];
                if c != 0.0 {
                    ke.add_lengthscale_grad(target, rows[a], c, out);
                }
            }
        }
    }
}

fn rows_of<'a>(x: &'a Matrix) -> Vec<&'a [f64]> {
    (0..x.rows()).map(|i| x.row(i)).collect()
}

/// Predictive distribution at `x_star` given observations `(x, y)` with
/// per-point noise variances `noise_diag`. Targets are centered on
/// `hp.mean_const`; the reported observed variance adds σ_obs².
pub fn predictive(
    x_star: &[f64],
    x: &Matrix,
    y: &[f64],
    noise_diag: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
) -> Result<GaussianPredictive> {
    check_dim(hp.dim(), x_star.len())?;
    check_dim(x.rows(), y.len())?;
    check_dim(x.rows(), noise_diag.len())?;
    if x.rows() > 0 {
        check_dim(hp.dim(), x.cols())?;
    }
    if noise_diag.iter().any(|v| !(*v > 0.0)) {
        return Err(GpError::Domain("noise variances must be positive".into()));
    }
    let ke = KernelEval::new(hp, kind);
    let rows = rows_of(x);
    predictive_rows(&ke, hp, x_star, &rows, y, NoiseDiag::PerPoint(noise_diag))
}

pub(crate) fn predictive_rows(
    ke: &KernelEval,
    hp: &Hyperparams,
    x_star: &[f64],
    rows: &[&[f64]],
    y: &[f64],
    noise: NoiseDiag<'_>,
) -> Result<GaussianPredictive> {
    let sys = LocalSystem::build(ke, Some(x_star), rows, noise, false)?;
    let c = hp.mean_const;
    let r: Vec<f64> = y.iter().map(|v| v - c).collect();
    let alpha = sys.solve(&r);
    let beta = sys.solve(&sys.kv);
    let mean = c + dot(&sys.kv, &alpha);
    let var_latent = sys.latent_var(&beta);
    Ok(GaussianPredictive {
        mean,
        var_latent,
        var_observed: var_latent + hp.noise_var(),
    })
}

/// Log density of `y_t` at `x_t` conditioned on `(rows, ys)` under
/// homoscedastic noise. When `grad` is given, the derivative with respect to
/// the flat hyperparameter vector (see [`Hyperparams::to_params`]) is added
/// to it.
pub(crate) fn conditional_log_density(
    ke: &KernelEval,
    hp: &Hyperparams,
    x_t: &[f64],
    y_t: f64,
    rows: &[&[f64]],
    ys: &[f64],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let s2 = hp.noise_var();
    let c = hp.mean_const;
    let sys = LocalSystem::build(ke, Some(x_t), rows, NoiseDiag::Constant(s2), grad.is_some())?;
    let r: Vec<f64> = ys.iter().map(|v| v - c).collect();
    let alpha = sys.solve(&r);
    let beta = sys.solve(&sys.kv);
    let mu = c + dot(&sys.kv, &alpha);
    let v = sys.latent_var(&beta) + s2;
    let e = y_t - mu;
    let value = -0.5 * (LN_2PI + v.ln()) - 0.5 * e * e / v;

    if let Some(g) = grad {
        let d = hp.dim();
        let dmu = e / v;
        let dv = -0.5 / v + 0.5 * e * e / (v * v);
        // ∂μ = ∂kv·α − βᵀ∂Aα,  ∂v = ∂k** − 2∂kv·β + βᵀ∂Aβ
        sys.add_lengthscale_grads(
            ke,
            x_t,
            rows,
            |a, b| {
                -dmu * (beta[a] * alpha[b] + beta[b] * alpha[a])
                    + dv * 2.0 * beta[a] * beta[b]
            },
            |a| dmu * alpha[a] - 2.0 * dv * beta[a],
            &mut g[..d],
        );
        let ba = dot(&beta, &alpha);
        let bb = dot(&beta, &beta);
        let kb = dot(&sys.kv, &beta);
        // ∂A/∂log σ_K = 2(A − σ²I), ∂kv = 2kv, ∂k** = 2(σ_K² + jitter)
        g[d] += dmu * 2.0 * s2 * ba + dv * (2.0 * sys.prior_var - 2.0 * kb - 2.0 * s2 * bb);
        // ∂A/∂log σ_obs = 2σ²I, plus the target's own noise
        g[d + 1] += dmu * (-2.0 * s2 * ba) + dv * (2.0 * s2 * bb + 2.0 * s2);
        g[d + 2] += dmu * (1.0 - beta.iter().sum::<f64>());
    }
    Ok(value)
}

/// Multivariate normal log density of `y − mean_const` under
/// `K + jitter·I + σ_obs²·I`.
pub fn exact_mll(x: &Matrix, y: &[f64], hp: &Hyperparams, kind: KernelKind) -> Result<f64> {
    if x.rows() == 0 {
        return Err(GpError::EmptyData);
    }
    check_dim(hp.dim(), x.cols())?;
    check_dim(x.rows(), y.len())?;
    let ke = KernelEval::new(hp, kind);
    let rows = rows_of(x);
    mll_rows(&ke, hp, &rows, y, None)
}

/// Joint marginal log likelihood of `(rows, ys)`, optionally accumulating the
/// gradient in the flat hyperparameter layout.
pub(crate) fn mll_rows(
    ke: &KernelEval,
    hp: &Hyperparams,
    rows: &[&[f64]],
    ys: &[f64],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = rows.len();
    let s2 = hp.noise_var();
    let sys = LocalSystem::build(ke, None, rows, NoiseDiag::Constant(s2), grad.is_some())?;
    let chol = sys.chol.as_ref().ok_or(GpError::EmptyData)?;
    let r: Vec<f64> = ys.iter().map(|v| v - hp.mean_const).collect();
    let alpha = chol.solve_vec(&r);
    let value = -0.5 * dot(&r, &alpha) - 0.5 * chol.log_det() - 0.5 * n as f64 * LN_2PI;

    if let Some(g) = grad {
        let d = hp.dim();
        // ∂L/∂θ = −½ Σ_ab W_ab ∂A_ab with W = A⁻¹ − ααᵀ
        let inv = chol.inverse();
        let w = |a: usize, b: usize| inv[(a, b)] - alpha[a] * alpha[b];
        sys.add_lengthscale_grads(ke, &[], rows, |a, b| -w(a, b), |_| 0.0, &mut g[..d]);
        let mut wk = 0.0;
        let mut trw = 0.0;
        for a in 0..n {
            let ka = &sys.kmat[a * n..(a + 1) * n];
            for (b, k) in ka.iter().enumerate() {
                wk += w(a, b) * k;
            }
            trw += w(a, a);
        }
        g[d] += -wk - sys.jitter * trw;
        g[d + 1] += -s2 * trw;
        g[d + 2] += alpha.iter().sum::<f64>();
    }
    Ok(value)
}

/// Dense GP conditioned on all of its training data, factorized once.
pub struct DenseGp {
    x: Matrix,
    hp: Hyperparams,
    ke: KernelEval,
    chol: Cholesky,
    alpha: Vec<f64>,
    prior_var: f64,
}

impl DenseGp {
    pub fn fit(x: &Matrix, y: &[f64], hp: &Hyperparams, kind: KernelKind) -> Result<Self> {
        if x.rows() == 0 {
            return Err(GpError::EmptyData);
        }
        check_dim(hp.dim(), x.cols())?;
        check_dim(x.rows(), y.len())?;
        let ke = KernelEval::new(hp, kind);
        let rows = rows_of(x);
        let sys = LocalSystem::build(&ke, None, &rows, NoiseDiag::Constant(hp.noise_var()), false)?;
        let chol = sys.chol.ok_or(GpError::EmptyData)?;
        let r: Vec<f64> = y.iter().map(|v| v - hp.mean_const).collect();
        let alpha = chol.solve_vec(&r);
        Ok(Self {
            x: x.clone(),
            hp: hp.clone(),
            ke,
            chol,
            alpha,
            prior_var: sys.prior_var,
        })
    }

    pub fn predict(&self, x_star: &[f64]) -> Result<GaussianPredictive> {
        check_dim(self.hp.dim(), x_star.len())?;
        let mut kv: Vec<f64> = (0..self.x.rows())
            .map(|i| self.ke.eval(x_star, self.x.row(i)))
            .collect();
        let mean = self.hp.mean_const + dot(&kv, &self.alpha);
        self.chol.solve_lower_in_place(&mut kv);
        let var_latent = (self.prior_var - dot(&kv, &kv)).max(0.0);
        Ok(GaussianPredictive {
            mean,
            var_latent,
            var_observed: var_latent + self.hp.noise_var(),
        })
    }
}
