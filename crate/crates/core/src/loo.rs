//! The k-truncated leave-one-out objective for regression, its mini-batch
//! estimate, training, and nearest-neighbor prediction.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::gp::{conditional_log_density, predictive_rows, GaussianPredictive, NoiseDiag};
use crate::kernels::{Hyperparams, KernelEval, KernelKind};
use crate::linalg::Matrix;
use crate::nn::{Backend, NeighborIndex, NeighborTable};
use crate::optim::{train_loop, Objective, TrainConfig, TrainTrace};

/// Trained regression hyperparameters together with their training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedRegressor {
    #[serde(flatten)]
    pub hp: Hyperparams,
    pub trace: TrainTrace,
}

/// Default starting point: unit lengthscales and scale, σ_obs = 0.5, and
/// the mean constant at the sample mean of `y`.
pub fn initial_hyperparams(dim: usize, y: &[f64]) -> Hyperparams {
    let mut hp = Hyperparams::new(dim);
    if !y.is_empty() {
        hp.mean_const = y.iter().sum::<f64>() / y.len() as f64;
    }
    hp
}

fn check_inputs(x: &Matrix, y: &[f64], hp: &Hyperparams, k: usize) -> Result<()> {
    let n = x.rows();
    if n == 0 {
        return Err(GpError::EmptyData);
    }
    check_dim(n, y.len())?;
    check_dim(hp.dim(), x.cols())?;
    if k == 0 || k >= n {
        return Err(GpError::InvalidConfig(format!(
            "k must lie in [1, {}], got {k}",
            n - 1
        )));
    }
    Ok(())
}

fn loo_term(
    ke: &KernelEval,
    hp: &Hyperparams,
    x: &Matrix,
    y: &[f64],
    i: usize,
    nb: &[usize],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let rows: Vec<&[f64]> = nb.iter().map(|&j| x.row(j)).collect();
    let ys: Vec<f64> = nb.iter().map(|&j| y[j]).collect();
    conditional_log_density(ke, hp, x.row(i), y[i], &rows, &ys, grad)
}

fn batch_average(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    batch: &[usize],
    neighbors: impl Fn(usize) -> Vec<usize>,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(GpError::InvalidConfig("empty batch".into()));
    }
    let ke = KernelEval::new(hp, kind);
    let mut grad = vec![0.0; hp.num_params()];
    let mut total = 0.0;
    for &i in batch {
        let nb = neighbors(i);
        let g = if with_grad { Some(grad.as_mut_slice()) } else { None };
        total += loo_term(&ke, hp, x, y, i, &nb, g)?;
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

/// Average over all points of the log predictive density of `y_n` given its
/// `k` nearest neighbors in `index` (self excluded).
pub fn loo_k_objective(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    k: usize,
    index: &NeighborIndex,
) -> Result<f64> {
    check_inputs(x, y, hp, k)?;
    check_dim(x.rows(), index.len())?;
    let all: Vec<usize> = (0..x.rows()).collect();
    let (v, _) = batch_average(x, y, hp, kind, &all, |i| index.query_point(i, k), false)?;
    Ok(v)
}

/// Batch average of the per-point LOO terms and its gradient in the flat
/// hyperparameter layout.
pub fn loo_k_minibatch(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    k: usize,
    index: &NeighborIndex,
    batch_idx: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_inputs(x, y, hp, k)?;
    check_dim(x.rows(), index.len())?;
    let mut seen = vec![false; x.rows()];
    for &i in batch_idx {
        if i >= x.rows() || std::mem::replace(&mut seen[i], true) {
            return Err(GpError::InvalidConfig(format!("bad or repeated batch index {i}")));
        }
    }
    batch_average(x, y, hp, kind, batch_idx, |i| index.query_point(i, k), true)
}

struct LooObjective<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    kind: KernelKind,
    k: usize,
    backend: Backend,
    table: NeighborTable,
}

impl Objective for LooObjective<'_> {
    fn num_points(&self) -> usize {
        self.x.rows()
    }

    fn num_params(&self) -> usize {
        self.x.cols() + 3
    }

    fn refresh(&mut self, params: &[f64]) -> Result<()> {
        let d = self.x.cols();
        let index = NeighborIndex::build(self.x, &params[..d], self.backend)?;
        self.table = index.neighbor_table(self.k);
        Ok(())
    }

    fn evaluate(&self, params: &[f64], batch: &[usize], _: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let hp = Hyperparams::from_params(self.x.cols(), params)?;
        hp.validate()?;
        let table = &self.table;
        batch_average(self.x, self.y, &hp, self.kind, batch, |i| table.neighbors(i).to_vec(), true)
    }
}

/// Runs `cfg.steps` steps of Adam ascent on the mini-batch LOO-k objective.
pub fn train(
    x: &Matrix,
    y: &[f64],
    hp0: &Hyperparams,
    kind: KernelKind,
    cfg: &TrainConfig,
) -> Result<(Hyperparams, TrainTrace)> {
    check_inputs(x, y, hp0, cfg.k)?;
    cfg.validate(x.rows())?;
    hp0.validate()?;
    let mut obj = LooObjective {
        x,
        y,
        kind,
        k: cfg.k,
        backend: cfg.backend,
        table: NeighborTable::default(),
    };
    let (p, trace) = train_loop(&mut obj, hp0.to_params(), cfg)?;
    Ok((Hyperparams::from_params(x.cols(), &p)?, trace))
}

/// Predictive distribution at each row of `x_test`, conditioned on its `k`
/// nearest training points.
pub fn predict(
    x_train: &Matrix,
    y_train: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    k: usize,
    index: &NeighborIndex,
    x_test: &Matrix,
) -> Result<Vec<GaussianPredictive>> {
    if x_train.rows() == 0 {
        return Err(GpError::EmptyData);
    }
    check_dim(x_train.rows(), y_train.len())?;
    check_dim(x_train.rows(), index.len())?;
    check_dim(hp.dim(), x_train.cols())?;
    check_dim(hp.dim(), x_test.cols())?;
    let ke = KernelEval::new(hp, kind);
    let noise = NoiseDiag::Constant(hp.noise_var());
    (0..x_test.rows())
        .map(|t| {
            let xs = x_test.row(t);
            let nb = index.query(xs, k, None)?;
            let rows: Vec<&[f64]> = nb.iter().map(|&j| x_train.row(j)).collect();
            let ys: Vec<f64> = nb.iter().map(|&j| y_train[j]).collect();
            predictive_rows(&ke, hp, xs, &rows, &ys, noise)
        })
        .collect()
}
