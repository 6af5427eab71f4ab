//! Adam ascent with a stepwise learning-rate schedule and the generic
//! mini-batch training loop shared by every objective.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::nn::Backend;

/// Optimizer and training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of nearest neighbors.
    pub k: usize,
    #[serde(alias = "B")]
    pub batch_size: usize,
    /// Total number of gradient steps.
    #[serde(alias = "T")]
    pub steps: usize,
    /// Rebuild the neighbor index every this many steps.
    #[serde(alias = "T_nn")]
    pub nn_refresh: usize,
    pub lr0: f64,
    /// `None` picks the objective's default (0.9 for LOO-k, 0.5 for MLL-type).
    pub beta1: Option<f64>,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub backend: Backend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 32,
            batch_size: 128,
            steps: 2000,
            nn_refresh: 50,
            lr0: 0.03,
            beta1: None,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            backend: Backend::KdTree,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against a data set of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        self.validate_with_k_max(n, n.saturating_sub(1))
    }

    /// As [`Self::validate`] but allowing `k` up to `k_max`.
    pub(crate) fn validate_with_k_max(&self, n: usize, k_max: usize) -> Result<()> {
        let bad = |m: String| Err(GpError::InvalidConfig(m));
        if n < 2 {
            return bad(format!("need at least 2 training points, got {n}"));
        }
        if self.k < 1 || self.k > k_max {
            return bad(format!("k must lie in [1, {k_max}], got {}", self.k));
        }
        if self.batch_size < 1 || self.batch_size > n {
            return bad(format!("batch size must lie in [1, {n}], got {}", self.batch_size));
        }
        if self.nn_refresh < 1 {
            return bad("nn_refresh must be at least 1".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if let Some(b1) = self.beta1 {
            if !(0.0..1.0).contains(&b1) {
                return bad(format!("beta1 must lie in [0, 1), got {b1}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("beta2 must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at zero-based step `s` of `total`: `lr0`, then divided by 5
/// after 25 %, 50 % and 75 % of the run.
pub fn learning_rate(lr0: f64, s: usize, total: usize) -> f64 {
    let frac = s as f64 / total.max(1) as f64;
    let drops = [0.25, 0.5, 0.75].iter().filter(|&&m| frac >= m).count();
    lr0 / 5f64.powi(drops as i32)
}

/// Adam moments for gradient ascent.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One ascent step: moves `params` along the bias-corrected moment ratio.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p += lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// A stochastic objective to be maximized by [`train_loop`].
pub trait Objective {
    fn num_points(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Parameters recorded in the trace (a prefix of the full vector).
    fn num_traced(&self) -> usize {
        self.num_params()
    }
    /// Default Adam β1 for this objective.
    fn default_beta1(&self) -> f64 {
        0.9
    }
    /// Whether each step uses every point regardless of the batch size.
    fn full_batch(&self) -> bool {
        false
    }
    /// Rebuilds neighbor structures from the current parameters.
    fn refresh(&mut self, params: &[f64]) -> Result<()>;
    /// Mini-batch value and gradient. `rng` supplies any per-step noise.
    fn evaluate(&self, params: &[f64], batch: &[usize], rng: &mut ChaCha8Rng)
        -> Result<(f64, Vec<f64>)>;
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub objective: Vec<f64>,
    /// Traced parameters after each step.
    pub params: Vec<Vec<f64>>,
    /// One-based steps at which the neighbor index was rebuilt.
    pub rebuild_steps: Vec<usize>,
    /// Wall-clock seconds per step, excluding index rebuilds.
    pub step_seconds: Vec<f64>,
    /// Wall-clock seconds per rebuild.
    pub rebuild_seconds: Vec<f64>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }

    pub fn total_seconds(&self) -> f64 {
        self.step_seconds.iter().sum::<f64>() + self.rebuild_seconds.iter().sum::<f64>()
    }

    pub fn rebuild_total(&self) -> f64 {
        self.rebuild_seconds.iter().sum()
    }

    /// Copy with wall-clock data removed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            step_seconds: Vec::new(),
            rebuild_seconds: Vec::new(),
            ..self.clone()
        }
    }
}

/// Runs `cfg.steps` steps of Adam ascent on `obj` starting from `init`.
///
/// At every step `t` (one-based) with `(t − 1) mod nn_refresh == 0` the
/// objective's neighbor structures are rebuilt from the current parameters
/// before the batch is drawn. Batches are drawn without replacement.
pub fn train_loop<O: Objective>(
    obj: &mut O,
    init: Vec<f64>,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, TrainTrace)> {
    let n = obj.num_points();
    if init.len() != obj.num_params() {
        return Err(GpError::DimensionMismatch {
            expected: obj.num_params(),
            got: init.len(),
        });
    }
    let mut params = init;
    let mut trace = TrainTrace::default();
    if cfg.steps == 0 {
        return Ok((params, trace));
    }
    let beta1 = cfg.beta1.unwrap_or_else(|| obj.default_beta1());
    let mut adam = Adam::new(params.len(), beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let full = obj.full_batch() || cfg.batch_size >= n;
    let all: Vec<usize> = (0..n).collect();
    let wrap = |step: usize, e: GpError| GpError::Training {
        step,
        source: Box::new(e),
    };

    for t in 1..=cfg.steps {
        if (t - 1) % cfg.nn_refresh == 0 {
            let start = Instant::now();
            obj.refresh(&params).map_err(|e| wrap(t, e))?;
            trace.rebuild_steps.push(t);
            trace.rebuild_seconds.push(start.elapsed().as_secs_f64());
        }
        let start = Instant::now();
        let batch: Vec<usize> = if full {
            all.clone()
        } else {
            sample(&mut rng, n, cfg.batch_size).into_vec()
        };
        let (value, grad) = obj.evaluate(&params, &batch, &mut rng).map_err(|e| wrap(t, e))?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(wrap(t, GpError::Domain("non-finite objective or gradient".into())));
        }
        let lr = learning_rate(cfg.lr0, t - 1, cfg.steps);
        adam.step(&mut params, &grad, lr);
        trace.step_seconds.push(start.elapsed().as_secs_f64());
        trace.objective.push(value);
        trace.params.push(params[..obj.num_traced()].to_vec());
    }
    Ok((params, trace))
}
