//! Stationary kernels with per-dimension lengthscales.
//!
//! All hyperparameters are stored in log space. Gradients are taken with
//! respect to the log parameters. For both kernels the derivative in the
//! i-th log-lengthscale factors as `g(r) · (x_i − z_i)² / ρ_i²`, where `g`
//! (the "radial factor") depends only on the scaled distance; the hot loops
//! exploit this.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::linalg::{Matrix, BASE_JITTER};

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    #[default]
    Matern52,
}

impl std::str::FromStr for KernelKind {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(KernelKind::Rbf),
            "matern52" | "matern" => Ok(KernelKind::Matern52),
            other => Err(GpError::InvalidConfig(format!("unknown kernel '{other}'"))),
        }
    }
}

/// Kernel and likelihood hyperparameters.
///
/// The flat parameter vector used by the optimizers is laid out as
/// `[log ρ_1 .. log ρ_D, log σ_K, log σ_obs, mean_const]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub log_lengthscales: Vec<f64>,
    pub log_kernel_scale: f64,
    pub log_obs_noise: f64,
    pub mean_const: f64,
}

impl Hyperparams {
    /// Scale-neutral starting point: unit lengthscales and kernel scale,
    /// σ_obs = 0.5, zero mean.
    pub fn new(dim: usize) -> Self {
        Self {
            log_lengthscales: vec![0.0; dim],
            log_kernel_scale: 0.0,
            log_obs_noise: 0.5f64.ln(),
            mean_const: 0.0,
        }
    }

    pub fn isotropic(dim: usize, lengthscale: f64, kernel_scale: f64, obs_noise: f64) -> Self {
        Self {
            log_lengthscales: vec![lengthscale.ln(); dim],
            log_kernel_scale: kernel_scale.ln(),
            log_obs_noise: obs_noise.ln(),
            mean_const: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|v| v.exp()).collect()
    }

    /// σ_K².
    pub fn kernel_var(&self) -> f64 {
        (2.0 * self.log_kernel_scale).exp()
    }

    /// σ_obs².
    pub fn noise_var(&self) -> f64 {
        (2.0 * self.log_obs_noise).exp()
    }

    /// Diagonal jitter added to kernel matrices before factorization.
    pub fn jitter(&self) -> f64 {
        BASE_JITTER * self.kernel_var()
    }

    pub fn num_params(&self) -> usize {
        self.dim() + 3
    }

    pub fn to_params(&self) -> Vec<f64> {
        let mut p = self.log_lengthscales.clone();
        p.extend([self.log_kernel_scale, self.log_obs_noise, self.mean_const]);
        p
    }

    pub fn from_params(dim: usize, p: &[f64]) -> Result<Self> {
        check_dim(dim + 3, p.len())?;
        Ok(Self {
            log_lengthscales: p[..dim].to_vec(),
            log_kernel_scale: p[dim],
            log_obs_noise: p[dim + 1],
            mean_const: p[dim + 2],
        })
    }

    /// Checks that every exponentiated field is finite and positive.
    pub fn validate(&self) -> Result<()> {
        let logs = self
            .log_lengthscales
            .iter()
            .chain([&self.log_kernel_scale, &self.log_obs_noise]);
        for &v in logs {
            let e = v.exp();
            if !(e.is_finite() && e > 0.0) {
                return Err(GpError::Domain(format!("log-hyperparameter {v} out of range")));
            }
        }
        if !self.mean_const.is_finite() {
            return Err(GpError::Domain("non-finite mean constant".into()));
        }
        Ok(())
    }
}

/// Precomputed kernel evaluator for a fixed set of hyperparameters.
#[derive(Clone, Debug)]
pub(crate) struct KernelEval {
    pub inv_ls2: Vec<f64>,
    pub var: f64,
    pub kind: KernelKind,
}

impl KernelEval {
    pub fn new(hp: &Hyperparams, kind: KernelKind) -> Self {
        Self {
            inv_ls2: hp.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect(),
            var: hp.kernel_var(),
            kind,
        }
    }

    #[inline]
    pub fn sq_dist(&self, x: &[f64], z: &[f64]) -> f64 {
        x.iter()
            .zip(z)
            .zip(&self.inv_ls2)
            .map(|((a, b), w)| {
                let d = a - b;
                d * d * w
            })
            .sum()
    }

    #[inline]
    pub fn from_sq_dist(&self, r2: f64) -> f64 {
        match self.kind {
            KernelKind::Rbf => self.var * (-0.5 * r2).exp(),
            KernelKind::Matern52 => {
                let d = r2.sqrt();
                self.var * (1.0 + SQRT5 * d + 5.0 / 3.0 * r2) * (-SQRT5 * d).exp()
            }
        }
    }

    /// Kernel value and radial factor `g` such that
    /// `∂k/∂log ρ_i = g · (x_i − z_i)² / ρ_i²`.
    #[inline]
    pub fn value_and_radial(&self, r2: f64) -> (f64, f64) {
        match self.kind {
            KernelKind::Rbf => {
                let k = self.var * (-0.5 * r2).exp();
                (k, k)
            }
            KernelKind::Matern52 => {
                let d = r2.sqrt();
                let e = self.var * (-SQRT5 * d).exp();
                let k = (1.0 + SQRT5 * d + 5.0 / 3.0 * r2) * e;
                (k, 5.0 / 3.0 * (1.0 + SQRT5 * d) * e)
            }
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        self.from_sq_dist(self.sq_dist(x, z))
    }

    /// Accumulates `scale · g · (x_i − z_i)² / ρ_i²` into `out[i]`.
    #[inline]
    pub fn add_lengthscale_grad(&self, x: &[f64], z: &[f64], scale: f64, out: &mut [f64]) {
        for ((o, (a, b)), w) in out.iter_mut().zip(x.iter().zip(z)).zip(&self.inv_ls2) {
            let d = a - b;
            *o += scale * d * d * w;
        }
    }
}

/// Distance after dividing each coordinate by its lengthscale.
pub fn scaled_distance(x: &[f64], z: &[f64], hp: &Hyperparams) -> Result<f64> {
    check_dim(hp.dim(), x.len())?;
    check_dim(hp.dim(), z.len())?;
    let s: f64 = x
        .iter()
        .zip(z)
        .zip(hp.lengthscales())
        .map(|((a, b), rho)| {
            let t = (a - b) / rho;
            t * t
        })
        .sum();
    Ok(s.sqrt())
}

pub fn kernel_eval(x: &[f64], z: &[f64], hp: &Hyperparams, kind: KernelKind) -> Result<f64> {
    check_dim(hp.dim(), x.len())?;
    check_dim(hp.dim(), z.len())?;
    Ok(KernelEval::new(hp, kind).eval(x, z))
}

pub fn kernel_matrix(x1: &Matrix, x2: &Matrix, hp: &Hyperparams, kind: KernelKind) -> Result<Matrix> {
    check_dim(hp.dim(), x1.cols())?;
    check_dim(hp.dim(), x2.cols())?;
    let ke = KernelEval::new(hp, kind);
    Ok(Matrix::from_fn(x1.rows(), x2.rows(), |i, j| {
        ke.eval(x1.row(i), x2.row(j))
    }))
}

/// Derivatives of a kernel matrix with respect to the log-hyperparameters.
#[derive(Clone, Debug)]
pub struct KernelGrads {
    /// `∂K/∂log ρ_i`, one matrix per input dimension.
    pub log_lengthscales: Vec<Matrix>,
    /// `∂K/∂log σ_K`, always `2K`.
    pub log_kernel_scale: Matrix,
}

pub fn kernel_grads(
    x1: &Matrix,
    x2: &Matrix,
    hp: &Hyperparams,
    kind: KernelKind,
) -> Result<KernelGrads> {
    check_dim(hp.dim(), x1.cols())?;
    check_dim(hp.dim(), x2.cols())?;
    let ke = KernelEval::new(hp, kind);
    let (n1, n2, d) = (x1.rows(), x2.rows(), hp.dim());
    let mut dls = vec![Matrix::zeros(n1, n2); d];
    let mut dsk = Matrix::zeros(n1, n2);
    let mut buf = vec![0.0; d];
    for i in 0..n1 {
        for j in 0..n2 {
            let (a, b) = (x1.row(i), x2.row(j));
            let (k, g) = ke.value_and_radial(ke.sq_dist(a, b));
            dsk[(i, j)] = 2.0 * k;
            buf.iter_mut().for_each(|v| *v = 0.0);
            ke.add_lengthscale_grad(a, b, g, &mut buf);
            for (m, v) in dls.iter_mut().zip(&buf) {
                m[(i, j)] = *v;
            }
        }
    }
    Ok(KernelGrads {
        log_lengthscales: dls,
        log_kernel_scale: dsk,
    })
}
