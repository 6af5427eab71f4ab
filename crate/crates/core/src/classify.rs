//! Binary and one-against-all multi-class classification with the
//! k-truncated leave-one-out objective under Pólya-Gamma augmentation.
//!
//! Each class head is a GP conditioned on pseudo-observations `y_j / (2ω_j)`
//! with heteroscedastic noise `1/ω_j` and zero prior mean. The σ_obs and mean
//! fields of a head's [`Hyperparams`] play no role and receive zero gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::gp::{predictive, LocalSystem, NoiseDiag};
use crate::kernels::{Hyperparams, KernelEval, KernelKind};
use crate::linalg::{dot, Matrix};
use crate::nn::{Backend, NeighborIndex, NeighborTable};
use crate::optim::{train_loop, Objective, TrainConfig, TrainTrace};
use crate::pg::{gh_expect_sigmoid, gh_expect_sigmoid_with_grad, kl_site, q_sample, GHRule, PGVariational};

/// Classification inputs with labels encoded as ±1 per head.
#[derive(Clone, Debug)]
pub struct ClassDataset {
    x: Matrix,
    /// N × H matrix of ±1; one column for binary data, one per class otherwise.
    signs: Matrix,
    /// Class index per point (multi-class only).
    classes: Option<Vec<usize>>,
}

impl ClassDataset {
    /// Binary data with labels in {−1, +1}.
    pub fn binary(x: Matrix, labels: &[f64]) -> Result<Self> {
        check_dim(x.rows(), labels.len())?;
        if x.rows() == 0 {
            return Err(GpError::EmptyData);
        }
        if let Some(bad) = labels.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(GpError::Format(format!("binary label {bad} is not ±1")));
        }
        Ok(Self {
            signs: Matrix::column(labels),
            x,
            classes: None,
        })
    }

    /// Multi-class data with class indices in `[0, num_classes)`, encoded
    /// one-against-all.
    pub fn multiclass(x: Matrix, labels: &[usize], num_classes: usize) -> Result<Self> {
        check_dim(x.rows(), labels.len())?;
        if x.rows() == 0 {
            return Err(GpError::EmptyData);
        }
        if num_classes < 2 {
            return Err(GpError::InvalidConfig("need at least 2 classes".into()));
        }
        if let Some(bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(GpError::Format(format!("class {bad} out of range")));
        }
        let signs = Matrix::from_fn(labels.len(), num_classes, |n, c| {
            if labels[n] == c {
                1.0
            } else {
                -1.0
            }
        });
        Ok(Self {
            x,
            signs,
            classes: Some(labels.to_vec()),
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn num_heads(&self) -> usize {
        self.signs.cols()
    }

    pub fn is_multiclass(&self) -> bool {
        self.classes.is_some()
    }

    pub fn sign(&self, n: usize, head: usize) -> f64 {
        self.signs[(n, head)]
    }

    /// Column of ±1 labels for one head.
    pub fn head_signs(&self, head: usize) -> Vec<f64> {
        (0..self.len()).map(|n| self.signs[(n, head)]).collect()
    }

    pub fn classes(&self) -> Option<&[usize]> {
        self.classes.as_deref()
    }
}

/// Kernel hyperparameters and variational factors of one class head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHead {
    pub hp: Hyperparams,
    pub q: PGVariational,
}

/// A binary (one head) or multi-class (one head per class) classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub kind: KernelKind,
    pub k: usize,
    pub heads: Vec<ClassHead>,
}

impl ClassifierState {
    /// Default start: unit lengthscales and scale, `q` median at 1/4.
    pub fn init(ds: &ClassDataset, kind: KernelKind, k: usize) -> Self {
        let mut hp = Hyperparams::new(ds.x.cols());
        hp.mean_const = 0.0;
        let head = ClassHead {
            hp,
            q: PGVariational::new(ds.len()),
        };
        Self {
            kind,
            k,
            heads: vec![head; ds.num_heads()],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.hp.dim())
    }

    pub fn num_sites(&self) -> usize {
        self.heads.first().map_or(0, |h| h.q.len())
    }

    /// Flat layout: every head's hyperparameters first, then for each head
    /// its locations `m` followed by its log-scales `log s`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.heads.iter().flat_map(|h| h.hp.to_params()).collect();
        for h in &self.heads {
            p.extend(&h.q.m);
            p.extend(h.q.s.iter().map(|s| s.ln()));
        }
        p
    }

    /// Copy of this state with parameters taken from `p` (see [`Self::to_params`]).
    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        let (h, d, n) = (self.num_heads(), self.dim(), self.num_sites());
        let hp_len = d + 3;
        check_dim(h * (hp_len + 2 * n), p.len())?;
        let mut out = self.clone();
        for (i, head) in out.heads.iter_mut().enumerate() {
            head.hp = Hyperparams::from_params(d, &p[i * hp_len..(i + 1) * hp_len])?;
            let base = h * hp_len + i * 2 * n;
            head.q.m = p[base..base + n].to_vec();
            head.q.s = p[base + n..base + 2 * n].iter().map(|v| v.exp()).collect();
        }
        Ok(out)
    }

    /// Index over the training inputs scaled by the per-dimension geometric
    /// mean of the heads' lengthscales.
    pub fn build_index(&self, x: &Matrix, backend: Backend) -> Result<NeighborIndex> {
        NeighborIndex::build(x, &self.shared_log_lengthscales(), backend)
    }

    pub fn shared_log_lengthscales(&self) -> Vec<f64> {
        let d = self.dim();
        let h = self.num_heads().max(1) as f64;
        (0..d)
            .map(|i| self.heads.iter().map(|hd| hd.hp.log_lengthscales[i]).sum::<f64>() / h)
            .collect()
    }

    fn validate(&self, ds: &ClassDataset) -> Result<()> {
        check_dim(ds.num_heads(), self.num_heads())?;
        for h in &self.heads {
            check_dim(ds.x.cols(), h.hp.dim())?;
            check_dim(ds.len(), h.q.len())?;
            h.hp.validate()?;
            h.q.validate()?;
        }
        if self.k == 0 {
            return Err(GpError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Posterior mean and latent variance at `x_n` given neighbor sites with
/// labels `y_nb` and auxiliary variables `omega_nb`.
pub fn conditional_posterior(
    x_n: &[f64],
    x_nb: &Matrix,
    y_nb: &[f64],
    omega_nb: &[f64],
    hp: &Hyperparams,
    kind: KernelKind,
) -> Result<(f64, f64)> {
    check_dim(x_nb.rows(), omega_nb.len())?;
    check_dim(x_nb.rows(), y_nb.len())?;
    if omega_nb.iter().any(|w| !(*w > 0.0)) {
        return Err(GpError::Domain("omega must be positive".into()));
    }
    let pseudo: Vec<f64> = y_nb.iter().zip(omega_nb).map(|(y, w)| y / (2.0 * w)).collect();
    let noise: Vec<f64> = omega_nb.iter().map(|w| 1.0 / w).collect();
    let mut hp0 = hp.clone();
    hp0.mean_const = 0.0;
    let p = predictive(x_n, x_nb, &pseudo, &noise, &hp0, kind)?;
    Ok((p.mean, p.var_latent))
}

/// One head's local conditional at a target point.
struct HeadLocal {
    sys: LocalSystem,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    mu: f64,
    var: f64,
}

fn head_local(
    ke: &KernelEval,
    target: &[f64],
    rows: &[&[f64]],
    signs: &[f64],
    omega: &[f64],
    with_grad: bool,
) -> Result<HeadLocal> {
    let noise: Vec<f64> = omega.iter().map(|w| 1.0 / w).collect();
    let pseudo: Vec<f64> = signs.iter().zip(omega).map(|(y, w)| y / (2.0 * w)).collect();
    let sys = LocalSystem::build(ke, Some(target), rows, NoiseDiag::PerPoint(&noise), with_grad)?;
    let alpha = sys.solve(&pseudo);
    let beta = sys.solve(&sys.kv);
    let mu = dot(&sys.kv, &alpha);
    let var = sys.latent_var(&beta);
    Ok(HeadLocal {
        sys,
        alpha,
        beta,
        mu,
        var,
    })
}

impl HeadLocal {
    /// Chain rule from `(dμ, dv)` into the head's hyperparameters and its
    /// neighbor sites' ω.
    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        ke: &KernelEval,
        target: &[f64],
        rows: &[&[f64]],
        signs: &[f64],
        omega: &[f64],
        dmu: f64,
        dv: f64,
        hp_grad: &mut [f64],
        mut site: impl FnMut(usize, f64),
    ) {
        let d = hp_grad.len() - 3;
        let (a, b) = (&self.alpha, &self.beta);
        self.sys.add_lengthscale_grads(
            ke,
            target,
            rows,
            |i, j| -dmu * (b[i] * a[j] + b[j] * a[i]) + dv * 2.0 * b[i] * b[j],
            |i| dmu * a[i] - 2.0 * dv * b[i],
            &mut hp_grad[..d],
        );
        let (mut ba_d, mut bb_d) = (0.0, 0.0);
        for j in 0..omega.len() {
            let inv = 1.0 / omega[j];
            ba_d += b[j] * a[j] * inv;
            bb_d += b[j] * b[j] * inv;
            let inv2 = inv * inv;
            site(j, dmu * b[j] * (a[j] - 0.5 * signs[j]) * inv2 - dv * b[j] * b[j] * inv2);
        }
        let kb = dot(&self.sys.kv, b);
        hp_grad[d] += dmu * 2.0 * ba_d + dv * (2.0 * self.sys.prior_var - 2.0 * kb - 2.0 * bb_d);
    }
}

/// Shared evaluation for any number of heads: batch-averaged data term minus
/// the full KL, with the gradient in [`ClassifierState::to_params`] layout.
fn class_objective(
    ds: &ClassDataset,
    state: &ClassifierState,
    neighbors: &dyn Fn(usize) -> Vec<usize>,
    gh: &GHRule,
    batch: &[usize],
    noise: &[f64],
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    state.validate(ds)?;
    let (h, n, d) = (state.num_heads(), ds.len(), ds.x.cols());
    check_dim(h * n, noise.len())?;
    if batch.is_empty() {
        return Err(GpError::InvalidConfig("empty batch".into()));
    }
    let hp_len = d + 3;
    let kes: Vec<KernelEval> = state.heads.iter().map(|hd| KernelEval::new(&hd.hp, state.kind)).collect();
    let omegas: Vec<Vec<f64>> = state
        .heads
        .iter()
        .enumerate()
        .map(|(i, hd)| q_sample(&hd.q, &noise[i * n..(i + 1) * n]))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; if with_grad { h * (hp_len + 2 * n) } else { 0 }];
    let mut g_omega = vec![vec![0.0; if with_grad { n } else { 0 }]; h];
    let mut data = 0.0;

    for &i in batch {
        let nb = neighbors(i);
        let rows: Vec<&[f64]> = nb.iter().map(|&j| ds.x.row(j)).collect();
        let target = ds.x.row(i);
        let mut locals = Vec::with_capacity(h);
        let mut fs = Vec::with_capacity(h);
        for c in 0..h {
            let signs: Vec<f64> = nb.iter().map(|&j| ds.sign(j, c)).collect();
            let om: Vec<f64> = nb.iter().map(|&j| omegas[c][j]).collect();
            let loc = head_local(&kes[c], target, &rows, &signs, &om, with_grad)?;
            // multi-class normalizes p̃(y = +1) of every head
            let yi = if ds.is_multiclass() { 1.0 } else { ds.sign(i, c) };
            fs.push(gh_expect_sigmoid_with_grad(yi, loc.mu, loc.var, gh));
            locals.push((loc, signs, om));
        }
        // d term / d F_c
        let weights: Vec<f64> = match ds.classes() {
            None => {
                let f = fs[0].0.max(f64::MIN_POSITIVE);
                data += f.ln();
                vec![1.0 / f]
            }
            Some(cls) => {
                let c = cls[i];
                let total: f64 = fs.iter().map(|f| f.0).sum();
                let fc = fs[c].0.max(f64::MIN_POSITIVE);
                data += fc.ln() - total.ln();
                (0..h)
                    .map(|k| if k == c { 1.0 / fc - 1.0 / total } else { -1.0 / total })
                    .collect()
            }
        };
        if with_grad {
            for c in 0..h {
                let (loc, signs, om) = &locals[c];
                let (dmu, dv) = (weights[c] * fs[c].1, weights[c] * fs[c].2);
                let go = &mut g_omega[c];
                loc.backprop(
                    &kes[c],
                    target,
                    &rows,
                    signs,
                    om,
                    dmu,
                    dv,
                    &mut grad[c * hp_len..(c + 1) * hp_len],
                    |j, v| go[nb[j]] += v,
                );
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let mut value = data * scale;
    if with_grad {
        grad[..h * hp_len].iter_mut().for_each(|g| *g *= scale);
    }
    for (c, hd) in state.heads.iter().enumerate() {
        let base = h * hp_len + c * 2 * n;
        for j in 0..n {
            let (m, s) = (hd.q.m[j], hd.q.s[j]);
            let (kl, dm, dls) = kl_site(m, s, gh)?;
            value -= kl;
            if with_grad {
                let w = omegas[c][j];
                let go = g_omega[c][j] * scale;
                grad[base + j] += go * w - dm;
                grad[base + n + j] += go * w * s * noise[c * n + j] - dls;
            }
        }
    }
    Ok((value, grad))
}

fn check_batch(n: usize, batch: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in batch {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(GpError::InvalidConfig(format!("bad or repeated batch index {i}")));
        }
    }
    Ok(())
}

fn check_index(ds: &ClassDataset, state: &ClassifierState, index: &NeighborIndex) -> Result<()> {
    check_dim(ds.len(), index.len())?;
    if state.k >= ds.len() {
        return Err(GpError::InvalidConfig(format!(
            "k must lie in [1, {}], got {}",
            ds.len() - 1,
            state.k
        )));
    }
    Ok(())
}

/// Binary objective with its gradient; see [`binary_loo_objective`].
pub fn binary_loo_objective_with_grad(
    ds: &ClassDataset,
    state: &ClassifierState,
    index: &NeighborIndex,
    gh: &GHRule,
    batch_idx: &[usize],
    noise: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if ds.is_multiclass() {
        return Err(GpError::InvalidConfig("binary objective needs binary labels".into()));
    }
    check_index(ds, state, index)?;
    check_batch(ds.len(), batch_idx)?;
    let k = state.k;
    class_objective(ds, state, &|i| index.query_point(i, k), gh, batch_idx, noise, true)
}

/// Batch average of `log E[sigmoid(y_n f_n)]` under one reparameterized draw
/// of ω, each point conditioned on its `k` nearest neighbors' sites, minus
/// the KL over all sites.
pub fn binary_loo_objective(
    ds: &ClassDataset,
    state: &ClassifierState,
    index: &NeighborIndex,
    gh: &GHRule,
    batch_idx: &[usize],
    noise: &[f64],
) -> Result<f64> {
    if ds.is_multiclass() {
        return Err(GpError::InvalidConfig("binary objective needs binary labels".into()));
    }
    check_index(ds, state, index)?;
    check_batch(ds.len(), batch_idx)?;
    let k = state.k;
    class_objective(ds, state, &|i| index.query_point(i, k), gh, batch_idx, noise, false).map(|r| r.0)
}

/// Multi-class objective with its gradient; see [`multiclass_objective`].
pub fn multiclass_objective_with_grad(
    ds: &ClassDataset,
    state: &ClassifierState,
    index: &NeighborIndex,
    gh: &GHRule,
    batch_idx: &[usize],
    noise: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !ds.is_multiclass() {
        return Err(GpError::InvalidConfig("multi-class objective needs class labels".into()));
    }
    check_index(ds, state, index)?;
    check_batch(ds.len(), batch_idx)?;
    let k = state.k;
    class_objective(ds, state, &|i| index.query_point(i, k), gh, batch_idx, noise, true)
}

/// Batch average of the log normalized true-class probability minus the KL
/// over all N×K sites. `noise` is laid out head by head.
pub fn multiclass_objective(
    ds: &ClassDataset,
    state: &ClassifierState,
    index: &NeighborIndex,
    gh: &GHRule,
    batch_idx: &[usize],
    noise: &[f64],
) -> Result<f64> {
    multiclass_objective_with_grad(ds, state, index, gh, batch_idx, noise).map(|r| r.0)
}

struct ClassObjective<'a> {
    ds: &'a ClassDataset,
    template: ClassifierState,
    backend: Backend,
    gh: GHRule,
    table: NeighborTable,
}

impl Objective for ClassObjective<'_> {
    fn num_points(&self) -> usize {
        self.ds.len()
    }

    fn num_params(&self) -> usize {
        self.template.num_heads() * (self.ds.x.cols() + 3 + 2 * self.ds.len())
    }

    fn num_traced(&self) -> usize {
        self.template.num_heads() * (self.ds.x.cols() + 3)
    }

    fn refresh(&mut self, params: &[f64]) -> Result<()> {
        let state = self.template.with_params(params)?;
        let index = state.build_index(&self.ds.x, self.backend)?;
        self.table = index.neighbor_table(state.k);
        Ok(())
    }

    fn evaluate(&self, params: &[f64], batch: &[usize], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        let state = self.template.with_params(params)?;
        let sites = state.num_heads() * self.ds.len();
        let noise: Vec<f64> = (0..sites).map(|_| rng.sample(StandardNormal)).collect();
        let table = &self.table;
        class_objective(self.ds, &state, &|i| table.neighbors(i).to_vec(), &self.gh, batch, &noise, true)
    }
}

/// Jointly optimizes every head's hyperparameters and variational factors
/// starting from `state0`.
pub fn train_classifier(
    ds: &ClassDataset,
    state0: &ClassifierState,
    cfg: &TrainConfig,
) -> Result<(ClassifierState, TrainTrace)> {
    state0.validate(ds)?;
    if cfg.k != state0.k {
        return Err(GpError::InvalidConfig(format!(
            "config k = {} differs from state k = {}",
            cfg.k, state0.k
        )));
    }
    cfg.validate(ds.len())?;
    let mut obj = ClassObjective {
        ds,
        template: state0.clone(),
        backend: cfg.backend,
        gh: GHRule::new(crate::pg::DEFAULT_QUADRATURE)?,
        table: NeighborTable::default(),
    };
    let (p, trace) = train_loop(&mut obj, state0.to_params(), cfg)?;
    if cfg.steps == 0 {
        // skip the log/exp round trip of the scales
        return Ok((state0.clone(), trace));
    }
    Ok((state0.with_params(&p)?, trace))
}

/// Trains a binary classifier from the default initialization.
pub fn train_binary(ds: &ClassDataset, kind: KernelKind, cfg: &TrainConfig) -> Result<(ClassifierState, TrainTrace)> {
    if ds.is_multiclass() {
        return Err(GpError::InvalidConfig("binary training needs binary labels".into()));
    }
    train_classifier(ds, &ClassifierState::init(ds, kind, cfg.k), cfg)
}

/// Trains one head per class from the default initialization.
pub fn train_multiclass(
    ds: &ClassDataset,
    kind: KernelKind,
    cfg: &TrainConfig,
) -> Result<(ClassifierState, TrainTrace)> {
    if !ds.is_multiclass() {
        return Err(GpError::InvalidConfig("multi-class training needs class labels".into()));
    }
    train_classifier(ds, &ClassifierState::init(ds, kind, cfg.k), cfg)
}

/// Unnormalized per-head probabilities `p̃_c(+1)` at each test point, under
/// one seeded draw of ω.
fn head_probabilities(
    state: &ClassifierState,
    ds: &ClassDataset,
    index: &NeighborIndex,
    x_test: &Matrix,
    gh: &GHRule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    state.validate(ds)?;
    check_dim(ds.len(), index.len())?;
    check_dim(ds.x.cols(), x_test.cols())?;
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omegas: Vec<Vec<f64>> = state
        .heads
        .iter()
        .map(|hd| {
            let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            q_sample(&hd.q, &eps)
        })
        .collect::<Result<_>>()?;
    let kes: Vec<KernelEval> = state.heads.iter().map(|hd| KernelEval::new(&hd.hp, state.kind)).collect();
    (0..x_test.rows())
        .map(|t| {
            let xs = x_test.row(t);
            let nb = index.query(xs, state.k, None)?;
            let rows: Vec<&[f64]> = nb.iter().map(|&j| ds.x.row(j)).collect();
            (0..state.num_heads())
                .map(|c| {
                    let signs: Vec<f64> = nb.iter().map(|&j| ds.sign(j, c)).collect();
                    let om: Vec<f64> = nb.iter().map(|&j| omegas[c][j]).collect();
                    let loc = head_local(&kes[c], xs, &rows, &signs, &om, false)?;
                    Ok(gh_expect_sigmoid(1.0, loc.mu, loc.var, gh))
                })
                .collect()
        })
        .collect()
}

/// `p(y = +1)` at each test point.
pub fn predict_binary(
    state: &ClassifierState,
    ds: &ClassDataset,
    index: &NeighborIndex,
    x_test: &Matrix,
    gh: &GHRule,
    seed: u64,
) -> Result<Vec<f64>> {
    if ds.is_multiclass() || state.num_heads() != 1 {
        return Err(GpError::InvalidConfig("binary prediction needs a single head".into()));
    }
    Ok(head_probabilities(state, ds, index, x_test, gh, seed)?
        .into_iter()
        .map(|p| p[0])
        .collect())
}

/// Jointly normalized one-against-all probabilities at each test point.
pub fn multiclass_predict(
    state: &ClassifierState,
    ds: &ClassDataset,
    index: &NeighborIndex,
    x_test: &Matrix,
    gh: &GHRule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if state.num_heads() < 2 {
        return Err(GpError::InvalidConfig("multi-class prediction needs at least 2 heads".into()));
    }
    let raw = head_probabilities(state, ds, index, x_test, gh, seed)?;
    Ok(raw.into_iter().map(|p| normalize_probabilities(&p)).collect())
}

/// `p̃_c / Σ p̃`.
pub fn normalize_probabilities(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    assert!(total > 0.0, "all class probabilities vanished");
    p.iter().map(|v| v / total).collect()
}

/// Index of the largest entry (first on ties).
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}
