//! Pólya-Gamma PG(1, 0) density, the log-Normal variational family over the
//! auxiliary variables, its KL divergence to the prior, and Gauss-Hermite
//! quadrature.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};

/// Upper end of the truncated PG support.
pub const OMEGA_MAX: f64 = 2.5;
/// Lower clamp applied before density evaluation.
pub const OMEGA_MIN: f64 = 1e-6;
/// Series terms used by default.
pub const DEFAULT_TERMS: usize = 7;
/// Quadrature order used by the classifiers.
pub const DEFAULT_QUADRATURE: usize = 16;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

fn check_omega(omega: f64, terms: usize) -> Result<()> {
    if !(omega > 0.0 && omega <= OMEGA_MAX) {
        return Err(GpError::Domain(format!("omega = {omega} outside (0, {OMEGA_MAX}]")));
    }
    if terms == 0 {
        return Err(GpError::InvalidConfig("series needs at least one term".into()));
    }
    Ok(())
}

/// Returns `(S, dS/dω)` for the correction `1 + S` of the leading term.
fn series_tail(omega: f64, terms: usize) -> (f64, f64) {
    let (mut s, mut ds) = (0.0, 0.0);
    let inv = 1.0 / omega;
    for n in 1..terms {
        // ((2n+1)² − 1)/8 = n(n+1)/2
        let a = (n * (n + 1)) as f64 / 2.0;
        let e = (-a * inv).exp();
        if e == 0.0 {
            break;
        }
        let c = if n % 2 == 1 { -((2 * n + 1) as f64) } else { (2 * n + 1) as f64 };
        s += c * e;
        ds += c * e * a * inv * inv;
    }
    (s, ds)
}

/// Log density of PG(1, 0) at `omega`, from the first `terms` terms of the
/// alternating series
/// `Σ (−1)ⁿ (2n+1) / √(2πω³) · exp(−(2n+1)² / (8ω))`.
pub fn pg_log_density(omega: f64, terms: usize) -> Result<f64> {
    pg_log_density_with_grad(omega, terms).map(|(v, _)| v)
}

/// [`pg_log_density`] together with its derivative in `omega`.
pub fn pg_log_density_with_grad(omega: f64, terms: usize) -> Result<(f64, f64)> {
    check_omega(omega, terms)?;
    let (s, ds) = series_tail(omega, terms);
    let one_s = 1.0 + s;
    if !(one_s > 0.0) {
        return Err(GpError::Domain(format!(
            "PG series with {terms} terms is non-positive at omega = {omega}"
        )));
    }
    let value = -HALF_LN_2PI - 1.5 * omega.ln() - 0.125 / omega + one_s.ln();
    let grad = -1.5 / omega + 0.125 / (omega * omega) + ds / one_s;
    Ok((value, grad))
}

/// Gauss-Hermite rule for integrals against `exp(−t²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GHRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GHRule {
    /// Nodes and weights from the eigen-decomposition of the Jacobi matrix.
    pub fn new(q: usize) -> Result<Self> {
        if q == 0 {
            return Err(GpError::InvalidConfig("quadrature order must be positive".into()));
        }
        let jac = Mat::<f64>::from_fn(q, q, |i, j| {
            if i.abs_diff(j) == 1 {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let evd = jac
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| GpError::Domain(format!("Jacobi eigen-decomposition failed: {e:?}")))?;
        let s = evd.S().column_vector();
        let u = evd.U();
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..q).map(|i| (s[i], sqrt_pi * u[(0, i)] * u[(0, i)])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize away rounding so that odd moments vanish exactly
        for i in 0..q / 2 {
            let j = q - 1 - i;
            let t = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-t, w);
            pairs[j] = (t, w);
        }
        if q % 2 == 1 {
            pairs[q / 2].0 = 0.0;
        }
        Ok(Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `∫ f(t) exp(−t²) dt`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

/// Mean-field log-Normal `q(ω_i) = LogNormal(m_i, s_i²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PGVariational {
    pub m: Vec<f64>,
    pub s: Vec<f64>,
}

impl PGVariational {
    /// Median at the PG(1, 0) mean 1/4 with scale 0.1.
    pub fn new(sites: usize) -> Self {
        Self {
            m: vec![0.25f64.ln(); sites],
            s: vec![0.1; sites],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.m.len(), self.s.len())?;
        if self.s.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.m.iter().any(|m| !m.is_finite()) {
            return Err(GpError::Domain("variational scales must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Reparameterized draw `ω_i = exp(m_i + s_i ε_i)`.
///
/// The draw is returned unclamped; [`clamp_omega`] is applied wherever the
/// prior density is evaluated.
pub fn q_sample(q: &PGVariational, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(q.len(), noise.len())?;
    Ok(q.m
        .iter()
        .zip(&q.s)
        .zip(noise)
        .map(|((m, s), e)| (m + s * e).exp())
        .collect())
}

pub fn clamp_omega(omega: f64) -> f64 {
    omega.clamp(OMEGA_MIN, OMEGA_MAX)
}

/// KL(q_i ‖ p) for a single site with derivatives in `m` and `log s`.
///
/// The cross-entropy is integrated by Gauss-Hermite quadrature in the
/// reparameterization noise, with ω clamped to the truncated support.
pub fn kl_site(m: f64, s: f64, gh: &GHRule) -> Result<(f64, f64, f64)> {
    let entropy = m + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s * s).ln();
    let (mut ce, mut dm, mut dls) = (0.0, 0.0, 0.0);
    let r2 = std::f64::consts::SQRT_2;
    for (&t, &w) in gh.nodes.iter().zip(&gh.weights) {
        let eps = r2 * t;
        let raw = (m + s * eps).exp();
        let om = clamp_omega(raw);
        let (lp, dlp) = pg_log_density_with_grad(om, DEFAULT_TERMS)?;
        let wq = w * INV_SQRT_PI;
        ce += wq * lp;
        if om == raw {
            dm += wq * dlp * raw;
            dls += wq * dlp * raw * s * eps;
        }
    }
    Ok((-entropy - ce, -1.0 - dm, -1.0 - dls))
}

/// Σ_i KL(q_i ‖ p), the prior being PG(1, 0) with its inverse-moment term
/// omitted.
pub fn kl_q_p(q: &PGVariational, gh: &GHRule) -> Result<f64> {
    q.validate()?;
    let mut total = 0.0;
    for (&m, &s) in q.m.iter().zip(&q.s) {
        total += kl_site(m, s, gh)?.0;
    }
    Ok(total)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `E[sigmoid(y f)]` for `f ~ N(mu, var)` by Gauss-Hermite quadrature.
pub fn gh_expect_sigmoid(y: f64, mu: f64, var: f64, gh: &GHRule) -> f64 {
    gh_expect_sigmoid_with_grad(y, mu, var, gh).0
}

/// [`gh_expect_sigmoid`] with derivatives in `mu` and `var`.
pub(crate) fn gh_expect_sigmoid_with_grad(y: f64, mu: f64, var: f64, gh: &GHRule) -> (f64, f64, f64) {
    let var = var.max(0.0);
    let sd = (2.0 * var).sqrt();
    let (mut f, mut dmu, mut dvar, mut curv) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &w) in gh.nodes.iter().zip(&gh.weights) {
        let p = sigmoid(y * (mu + sd * t));
        let dp = p * (1.0 - p);
        f += w * p;
        dmu += w * dp * y;
        if sd > 0.0 {
            dvar += w * dp * y * t / sd;
        } else {
            curv += w * dp * (1.0 - 2.0 * p);
        }
    }
    if sd == 0.0 {
        // limit of the quadrature derivative as var → 0
        dvar = 0.5 * curv;
    }
    (f * INV_SQRT_PI, dmu * INV_SQRT_PI, dvar * INV_SQRT_PI)
}
