//! Comparison objectives trained with the same optimizer: the exact marginal
//! likelihood, its k-point local version, and the Vecchia approximation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::gp::{conditional_log_density, mll_rows};
use crate::kernels::{Hyperparams, KernelEval, KernelKind};
use crate::linalg::Matrix;
use crate::nn::{Backend, NeighborIndex, NeighborTable};
use crate::optim::{train_loop, Objective, TrainConfig, TrainTrace};

/// Largest data set accepted by the dense exact-MLL trainer.
pub const EXACT_MLL_MAX_N: usize = 4096;

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMethod {
    Pca1,
    Given,
}

/// A permutation of the training points for the Vecchia chain rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub perm: Vec<usize>,
    pub method: OrderingMethod,
}

impl Ordering {
    pub fn given(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &i in &perm {
            if i >= perm.len() || std::mem::replace(&mut seen[i], true) {
                return Err(GpError::InvalidConfig("ordering is not a permutation".into()));
            }
        }
        Ok(Self {
            perm,
            method: OrderingMethod::Given,
        })
    }

    /// Points sorted by their projection onto the first principal component
    /// (ties by index).
    pub fn pca1(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(GpError::EmptyData);
        }
        let v = first_principal_component(x);
        let proj: Vec<f64> = (0..x.rows())
            .map(|i| x.row(i).iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut perm: Vec<usize> = (0..x.rows()).collect();
        perm.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
        Ok(Self {
            perm,
            method: OrderingMethod::Pca1,
        })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Unit leading eigenvector of the centered Gram matrix `XcᵀXc`, by power
/// iteration, signed so that its largest-magnitude entry is positive.
pub fn first_principal_component(x: &Matrix) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut gram = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            let ca = r[a] - mean[a];
            for b in 0..d {
                gram[a * d + b] += ca * (r[b] - mean[b]);
            }
        }
    }
    // start from the largest Gram column, which has a component along the
    // leading eigenvector unless that eigenvector vanishes at its index
    let col_norm = |b: usize| (0..d).map(|a| gram[a * d + b].powi(2)).sum::<f64>();
    let start = (0..d).fold(0, |best, b| if col_norm(b) > col_norm(best) { b } else { best });
    let mut v: Vec<f64> = (0..d).map(|a| gram[a * d + start]).collect();
    if normalize(&mut v) == 0.0 {
        v = (0..d).map(|i| 1.0 / (i + 1) as f64).collect();
        normalize(&mut v);
    }
    for _ in 0..POWER_MAX_ITERS {
        let mut w: Vec<f64> = (0..d)
            .map(|a| (0..d).map(|b| gram[a * d + b] * v[b]).sum())
            .collect();
        if normalize(&mut w) == 0.0 {
            break;
        }
        let diff: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if diff < POWER_TOL {
            break;
        }
    }
    let big = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
    if d > 0 && v[big] < 0.0 {
        v.iter_mut().for_each(|c| *c = -*c);
    }
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|a| *a /= norm);
    }
    norm
}

/// For each point (by original index), up to `k` nearest points among those
/// strictly earlier in `ordering`, in the metric scaled by the lengthscales.
pub fn vecchia_neighbors(x: &Matrix, log_lengthscales: &[f64], k: usize, ordering: &Ordering) -> Result<Vec<Vec<usize>>> {
    check_dim(x.rows(), ordering.len())?;
    check_dim(x.cols(), log_lengthscales.len())?;
    let inv2: Vec<f64> = log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect();
    let mut out = vec![Vec::new(); x.rows()];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(x.rows());
    for (p, &i) in ordering.perm.iter().enumerate() {
        cand.clear();
        let xi = x.row(i);
        for &j in &ordering.perm[..p] {
            let d2: f64 = xi
                .iter()
                .zip(x.row(j))
                .zip(&inv2)
                .map(|((a, b), s)| (a - b) * (a - b) * s)
                .sum();
            cand.push((d2, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if cand.len() > k {
            cand.select_nth_unstable_by(k, cmp);
            cand.truncate(k);
        }
        cand.sort_by(cmp);
        out[i] = cand.iter().map(|c| c.1).collect();
    }
    Ok(out)
}

fn check_xy(x: &Matrix, y: &[f64], hp: &Hyperparams) -> Result<()> {
    if x.rows() == 0 {
        return Err(GpError::EmptyData);
    }
    check_dim(x.rows(), y.len())?;
    check_dim(hp.dim(), x.cols())
}

fn mll_k_term(
    ke: &KernelEval,
    hp: &Hyperparams,
    x: &Matrix,
    y: &[f64],
    n: usize,
    nb: &[usize],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let mut rows = Vec::with_capacity(nb.len() + 1);
    let mut ys = Vec::with_capacity(nb.len() + 1);
    rows.push(x.row(n));
    ys.push(y[n]);
    for &j in nb {
        rows.push(x.row(j));
        ys.push(y[j]);
    }
    mll_rows(ke, hp, &rows, &ys, grad)
}

fn vecchia_term(
    ke: &KernelEval,
    hp: &Hyperparams,
    x: &Matrix,
    y: &[f64],
    n: usize,
    nb: &[usize],
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let rows: Vec<&[f64]> = nb.iter().map(|&j| x.row(j)).collect();
    let ys: Vec<f64> = nb.iter().map(|&j| y[j]).collect();
    conditional_log_density(ke, hp, x.row(n), y[n], &rows, &ys, grad)
}

/// Average over points of the joint marginal log likelihood of each point
/// together with its `k − 1` nearest neighbors.
pub fn mll_k_objective(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    k: usize,
    index: &NeighborIndex,
) -> Result<f64> {
    let all: Vec<usize> = (0..x.rows()).collect();
    mll_k_minibatch(x, y, hp, kind, k, index, &all).map(|r| r.0)
}

/// Batch average of the k-point marginal log likelihoods and its gradient.
pub fn mll_k_minibatch(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    k: usize,
    index: &NeighborIndex,
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_xy(x, y, hp)?;
    check_dim(x.rows(), index.len())?;
    if k == 0 || k > x.rows() {
        return Err(GpError::InvalidConfig(format!("k must lie in [1, {}], got {k}", x.rows())));
    }
    let ke = KernelEval::new(hp, kind);
    average(hp, batch, |n, g| mll_k_term(&ke, hp, x, y, n, &index.query_point(n, k - 1), g))
}

/// Average over points of the Vecchia conditionals: each point given its `k`
/// nearest predecessors in `ordering`.
pub fn vecchia_objective(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    k: usize,
    ordering: &Ordering,
) -> Result<f64> {
    let all: Vec<usize> = (0..x.rows()).collect();
    vecchia_minibatch(x, y, hp, kind, k, ordering, &all).map(|r| r.0)
}

/// Batch average of Vecchia conditionals (batch given as point indices) and
/// its gradient. Conditioning sets use the lengthscales in `hp`.
pub fn vecchia_minibatch(
    x: &Matrix,
    y: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
    k: usize,
    ordering: &Ordering,
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_xy(x, y, hp)?;
    if k == 0 {
        return Err(GpError::InvalidConfig("k must be at least 1".into()));
    }
    let sets = vecchia_neighbors(x, &hp.log_lengthscales, k, ordering)?;
    let ke = KernelEval::new(hp, kind);
    average(hp, batch, |n, g| vecchia_term(&ke, hp, x, y, n, &sets[n], g))
}

fn average(
    hp: &Hyperparams,
    batch: &[usize],
    mut term: impl FnMut(usize, Option<&mut [f64]>) -> Result<f64>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(GpError::InvalidConfig("empty batch".into()));
    }
    let mut grad = vec![0.0; hp.num_params()];
    let mut total = 0.0;
    for &n in batch {
        total += term(n, Some(&mut grad))?;
    }
    let s = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= s);
    Ok((total * s, grad))
}

/// Baseline objectives accepted by [`train_baseline`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    ExactMll,
    MllK,
    Vecchia,
}

enum Sets {
    None,
    Table(NeighborTable),
    Vecchia(Vec<Vec<usize>>),
}

struct BaselineObjective<'a> {
    which: BaselineKind,
    x: &'a Matrix,
    y: &'a [f64],
    kind: KernelKind,
    k: usize,
    backend: Backend,
    ordering: Option<Ordering>,
    sets: Sets,
}

impl Objective for BaselineObjective<'_> {
    fn num_points(&self) -> usize {
        self.x.rows()
    }

    fn num_params(&self) -> usize {
        self.x.cols() + 3
    }

    fn default_beta1(&self) -> f64 {
        0.5
    }

    fn full_batch(&self) -> bool {
        self.which == BaselineKind::ExactMll
    }

    fn refresh(&mut self, params: &[f64]) -> Result<()> {
        let ls = &params[..self.x.cols()];
        self.sets = match self.which {
            BaselineKind::ExactMll => Sets::None,
            BaselineKind::MllK => {
                let index = NeighborIndex::build(self.x, ls, self.backend)?;
                Sets::Table(index.neighbor_table(self.k - 1))
            }
            BaselineKind::Vecchia => {
                let ord = self.ordering.as_ref().expect("ordering set at construction");
                Sets::Vecchia(vecchia_neighbors(self.x, ls, self.k, ord)?)
            }
        };
        Ok(())
    }

    fn evaluate(&self, params: &[f64], batch: &[usize], _: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let hp = Hyperparams::from_params(self.x.cols(), params)?;
        hp.validate()?;
        let ke = KernelEval::new(&hp, self.kind);
        let (x, y) = (self.x, self.y);
        match &self.sets {
            Sets::None => {
                let rows: Vec<&[f64]> = (0..x.rows()).map(|i| x.row(i)).collect();
                let mut g = vec![0.0; hp.num_params()];
                let v = mll_rows(&ke, &hp, &rows, y, Some(&mut g))?;
                Ok((v, g))
            }
            Sets::Table(t) => average(&hp, batch, |n, g| {
                let nb = if t.k() == 0 { &[][..] } else { t.neighbors(n) };
                mll_k_term(&ke, &hp, x, y, n, nb, g)
            }),
            Sets::Vecchia(s) => average(&hp, batch, |n, g| vecchia_term(&ke, &hp, x, y, n, &s[n], g)),
        }
    }
}

/// Trains `which` with the shared Adam loop. The exact MLL is full batch and
/// limited to [`EXACT_MLL_MAX_N`] points; the others use mini-batches and
/// refresh their neighbor sets on the usual schedule.
pub fn train_baseline(
    which: BaselineKind,
    x: &Matrix,
    y: &[f64],
    hp0: &Hyperparams,
    kind: KernelKind,
    cfg: &TrainConfig,
) -> Result<(Hyperparams, TrainTrace)> {
    check_xy(x, y, hp0)?;
    hp0.validate()?;
    let n = x.rows();
    match which {
        BaselineKind::ExactMll => {
            if n > EXACT_MLL_MAX_N {
                return Err(GpError::SizeGuard {
                    what: "exact MLL training points",
                    value: n,
                    limit: EXACT_MLL_MAX_N,
                });
            }
            // k plays no role; only the optimizer fields are checked
            let mut c = cfg.clone();
            c.k = 1;
            c.batch_size = c.batch_size.min(n);
            c.validate_with_k_max(n, n)?;
        }
        BaselineKind::MllK => cfg.validate_with_k_max(n, n)?,
        BaselineKind::Vecchia => cfg.validate_with_k_max(n, n.saturating_sub(1).max(1))?,
    }
    let ordering = match which {
        BaselineKind::Vecchia => Some(Ordering::pca1(x)?),
        _ => None,
    };
    let mut obj = BaselineObjective {
        which,
        x,
        y,
        kind,
        k: cfg.k,
        backend: cfg.backend,
        ordering,
        sets: Sets::None,
    };
    let (p, trace) = train_loop(&mut obj, hp0.to_params(), cfg)?;
    Ok((Hyperparams::from_params(x.cols(), &p)?, trace))
}
