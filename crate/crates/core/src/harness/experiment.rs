//! Config-driven experiments: generate or load data, split, normalize, train
//! each method, evaluate, and write results.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{
    apply_warp, degenerate_augment, enlarge, encode_classes, normalize, parse_binary_labels, read_csv_table,
    sample_gp_dataset, split, Dataset, Normalizer, Split, SplitSpec, WarpKind, WarpSpec,
};
use super::metrics::{evaluate_binary, evaluate_classification, evaluate_regression, MetricsReport};
use super::plot::{line_plot, Series};
use crate::baselines::{train_baseline, BaselineKind};
use crate::classify::{multiclass_predict, predict_binary, train_binary, train_multiclass, ClassDataset};
use crate::error::{GpError, Result};
use crate::gp::{DenseGp, GaussianPredictive};
use crate::kernels::{Hyperparams, KernelKind};
use crate::linalg::Matrix;
use crate::loo::{self, initial_hyperparams};
use crate::nn::NeighborIndex;
use crate::optim::{TrainConfig, TrainTrace};
use crate::pg::{GHRule, DEFAULT_QUADRATURE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Misspec,
    Ksweep,
    Runtime,
    Degenerate,
    Custom,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Misspec => "misspec",
            ExperimentKind::Ksweep => "ksweep",
            ExperimentKind::Runtime => "runtime",
            ExperimentKind::Degenerate => "degenerate",
            ExperimentKind::Custom => "custom",
        }
    }
}

/// Training objectives available to experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "loo-k")]
    LooK,
    #[serde(rename = "mll")]
    Mll,
    #[serde(rename = "mll-k")]
    MllK,
    #[serde(rename = "vecchia")]
    Vecchia,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::LooK => "loo-k",
            Method::Mll => "mll",
            Method::MllK => "mll-k",
            Method::Vecchia => "vecchia",
        }
    }

    /// Whether the method has a neighbor count.
    pub fn uses_k(self) -> bool {
        self != Method::Mll
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learning task of a data set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Reg,
    Bin,
    Multi,
}

impl std::str::FromStr for Task {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg" => Ok(Task::Reg),
            "bin" => Ok(Task::Bin),
            "multi" => Ok(Task::Multi),
            other => Err(GpError::InvalidConfig(format!("unknown task '{other}'"))),
        }
    }
}

/// Data-generation settings; unused fields are ignored by each experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of generated points (experiment-specific default).
    pub n: Option<usize>,
    pub dim: usize,
    pub lengthscale: f64,
    pub kernel_scale: f64,
    pub obs_noise: f64,
    pub generator_kernel: KernelKind,
    pub model_kernel: KernelKind,
    pub gammas: Vec<f64>,
    pub warps: Vec<WarpKind>,
    /// Data sizes for the runtime study.
    pub sizes: Vec<usize>,
    /// Size of the generated base set enlarged by the runtime study.
    pub base_n: usize,
    pub enlarge_noise: f64,
    /// Train:test:validation proportions (experiment-specific default).
    pub split: Option<[f64; 3]>,
    /// Data CSV for custom experiments.
    pub path: Option<PathBuf>,
    pub task: Task,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: None,
            dim: 4,
            lengthscale: 0.5,
            kernel_scale: 1.0,
            obs_noise: 0.1,
            generator_kernel: KernelKind::Rbf,
            model_kernel: KernelKind::Matern52,
            gammas: vec![0.0, 0.5, 1.0, 2.0],
            warps: vec![WarpKind::NegStretch, WarpKind::PosPower, WarpKind::Cubic],
            sizes: vec![1000, 10_000, 100_000],
            base_n: 1000,
            enlarge_noise: 1e-2,
            split: None,
            path: None,
            task: Task::Reg,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::LooK]
}

/// Top-level experiment description read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Neighbor counts; defaults to `train_config.k`.
    #[serde(default)]
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub train_config: TrainConfig,
    /// Per-method override of the number of training steps.
    #[serde(default)]
    pub method_steps: BTreeMap<Method, usize>,
    #[serde(default)]
    pub data: DataConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub plots: bool,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GpError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GpError::InvalidConfig(m.into()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.k_values.contains(&0) || self.train_config.k == 0 {
            return bad("k values must be at least 1");
        }
        if self.data.dim == 0 {
            return bad("data.dim must be at least 1");
        }
        if self.data.gammas.iter().any(|g| !(*g >= 0.0)) {
            return bad("gammas must be nonnegative");
        }
        match self.experiment {
            ExperimentKind::Runtime => {
                if self.methods.iter().any(|m| !matches!(m, Method::LooK | Method::MllK)) {
                    return bad("the runtime study supports only loo-k and mll-k");
                }
            }
            ExperimentKind::Custom => {
                if self.data.path.is_none() {
                    return bad("custom experiments need data.path");
                }
                if self.data.task != Task::Reg && self.methods.iter().any(|m| *m != Method::LooK) {
                    return bad("classification supports only loo-k");
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn ks(&self) -> Vec<usize> {
        if self.k_values.is_empty() {
            vec![self.train_config.k]
        } else {
            self.k_values.clone()
        }
    }

    fn train_cfg(&self, method: Method, k: usize, seed: u64) -> TrainConfig {
        let mut c = self.train_config.clone();
        c.k = k;
        c.seed = seed;
        if let Some(&s) = self.method_steps.get(&method) {
            c.steps = s;
        }
        c
    }

    fn split_spec(&self, default: [f64; 3], seed: u64) -> SplitSpec {
        let p = self.data.split.unwrap_or(default);
        SplitSpec {
            train: p[0],
            test: p[1],
            validation: p[2],
            seed: seed ^ SPLIT_SALT,
        }
    }

    fn generator_hp(&self) -> Hyperparams {
        Hyperparams::isotropic(
            self.data.dim,
            self.data.lengthscale,
            self.data.kernel_scale,
            self.data.obs_noise,
        )
    }
}

const SPLIT_SALT: u64 = 0x5eed_5b11_7000_0001;
const AUGMENT_SALT: u64 = 0x5eed_a06e_0000_0002;
const ENLARGE_SALT: u64 = 0x5eed_e11a_0000_0003;
const PREDICT_SALT: u64 = 0x5eed_9ed1_0000_0004;

/// One results row; absent fields are written as empty cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub k: Option<usize>,
    pub warp: Option<String>,
    pub gamma: Option<f64>,
    pub n: Option<usize>,
    pub dataset: Option<String>,
    pub metrics: Option<MetricsReport>,
    pub lengthscale_gm: Option<f64>,
    pub obs_noise: Option<f64>,
    pub train_seconds: f64,
    pub nn_seconds: f64,
    pub step_seconds: Option<f64>,
}

impl ResultRow {
    fn cell(&self, col: &str) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let m = self.metrics.unwrap_or_default();
        let has = self.metrics.is_some();
        match col {
            "method" => self.method.clone(),
            "seed" => self.seed.to_string(),
            "k" => self.k.map(|v| v.to_string()).unwrap_or_default(),
            "warp" => self.warp.clone().unwrap_or_default(),
            "gamma" => f(self.gamma),
            "n" => self.n.map(|v| v.to_string()).unwrap_or_default(),
            "dataset" => self.dataset.clone().unwrap_or_default(),
            "nll" => f(has.then_some(m.nll)),
            "rmse" => f(m.rmse),
            "crps" => f(m.crps),
            "error" => f(m.error),
            "lengthscale_gm" => f(self.lengthscale_gm),
            "obs_noise" => f(self.obs_noise),
            "train_seconds" => self.train_seconds.to_string(),
            "nn_seconds" => self.nn_seconds.to_string(),
            "step_seconds" => f(self.step_seconds),
            other => unreachable!("unknown column {other}"),
        }
    }

    /// Test log likelihood (negated NLL).
    pub fn test_ll(&self) -> Option<f64> {
        self.metrics.map(|m| -m.nll)
    }
}

fn columns(kind: ExperimentKind) -> &'static [&'static str] {
    match kind {
        ExperimentKind::Misspec => &[
            "method", "seed", "k", "warp", "gamma", "nll", "rmse", "crps", "error", "obs_noise", "train_seconds",
            "nn_seconds",
        ],
        ExperimentKind::Ksweep | ExperimentKind::Custom => &[
            "method", "seed", "k", "nll", "rmse", "crps", "error", "train_seconds", "nn_seconds",
        ],
        ExperimentKind::Runtime => &["method", "seed", "k", "n", "step_seconds", "train_seconds", "nn_seconds"],
        ExperimentKind::Degenerate => &[
            "method", "seed", "k", "dataset", "n", "nll", "rmse", "crps", "error", "lengthscale_gm",
            "train_seconds", "nn_seconds",
        ],
    }
}

/// Whether a results column holds wall-clock measurements.
pub fn is_timing_column(name: &str) -> bool {
    name.contains("seconds")
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub kind: ExperimentKind,
    pub rows: Vec<ResultRow>,
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub manifest: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// A trained regression model ready to predict.
struct Fitted {
    hp: Hyperparams,
    trace: TrainTrace,
}

fn fit(method: Method, train: &Dataset, kind: KernelKind, cfg: &TrainConfig) -> Result<Fitted> {
    let hp0 = initial_hyperparams(train.dim(), &train.y);
    let (hp, trace) = match method {
        Method::LooK => loo::train(&train.x, &train.y, &hp0, kind, cfg)?,
        Method::Mll => train_baseline(BaselineKind::ExactMll, &train.x, &train.y, &hp0, kind, cfg)?,
        Method::MllK => train_baseline(BaselineKind::MllK, &train.x, &train.y, &hp0, kind, cfg)?,
        Method::Vecchia => train_baseline(BaselineKind::Vecchia, &train.x, &train.y, &hp0, kind, cfg)?,
    };
    Ok(Fitted { hp, trace })
}

/// Dense prediction for the exact-MLL model, nearest-neighbor prediction
/// (with the model's own `k`) otherwise.
struct Predictor<'a> {
    train: &'a Dataset,
    hp: &'a Hyperparams,
    kind: KernelKind,
    k: usize,
    dense: Option<DenseGp>,
    index: Option<NeighborIndex>,
}

impl<'a> Predictor<'a> {
    fn new(method: Method, train: &'a Dataset, hp: &'a Hyperparams, kind: KernelKind, cfg: &TrainConfig) -> Result<Self> {
        let (dense, index) = if method == Method::Mll {
            (Some(DenseGp::fit(&train.x, &train.y, hp, kind)?), None)
        } else {
            (None, Some(NeighborIndex::build(&train.x, &hp.log_lengthscales, cfg.backend)?))
        };
        Ok(Self {
            train,
            hp,
            kind,
            k: cfg.k,
            dense,
            index,
        })
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<GaussianPredictive>> {
        match (&self.dense, &self.index) {
            (Some(gp), _) => (0..x.rows()).map(|i| gp.predict(x.row(i))).collect(),
            (None, Some(idx)) => loo::predict(&self.train.x, &self.train.y, self.hp, self.kind, self.k, idx, x),
            _ => unreachable!(),
        }
    }

    fn evaluate(&self, ds: &Dataset) -> Result<MetricsReport> {
        evaluate_regression(&self.predict(&ds.x)?, &ds.y)
    }
}

fn lengthscale_gm(hp: &Hyperparams) -> f64 {
    (hp.log_lengthscales.iter().sum::<f64>() / hp.dim().max(1) as f64).exp()
}

/// Trains `method` for every candidate `k` (or once if it has none), and
/// reports test metrics of the candidate with the best validation log
/// likelihood. Without a validation set every candidate is reported.
#[allow(clippy::too_many_arguments)]
fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    ks: &[usize],
    train: &Dataset,
    validation: Option<&Dataset>,
    test: &Dataset,
    kind: KernelKind,
    base: &ResultRow,
) -> Result<Vec<ResultRow>> {
    let cands: Vec<usize> = if method.uses_k() { ks.to_vec() } else { vec![cfg.train_config.k] };
    let mut rows = Vec::new();
    let mut best: Option<(f64, ResultRow)> = None;
    for &k in &cands {
        let tc = cfg.train_cfg(method, k.min(train.len().saturating_sub(1)).max(1), seed);
        let ctx = |e: GpError| e.context(format!("method {method}, seed {seed}, k {k}"));
        let fitted = fit(method, train, kind, &tc).map_err(ctx)?;
        let pred = Predictor::new(method, train, &fitted.hp, kind, &tc).map_err(ctx)?;
        let metrics = pred.evaluate(test).map_err(ctx)?;
        let row = ResultRow {
            method: method.name().into(),
            seed,
            k: method.uses_k().then_some(tc.k),
            metrics: Some(metrics),
            lengthscale_gm: Some(lengthscale_gm(&fitted.hp)),
            obs_noise: Some(fitted.hp.noise_var().sqrt()),
            train_seconds: fitted.trace.total_seconds(),
            nn_seconds: fitted.trace.rebuild_total(),
            ..base.clone()
        };
        match validation.filter(|v| !v.is_empty() && cands.len() > 1) {
            Some(v) => {
                let val_ll = -pred.evaluate(v).map_err(ctx)?.nll;
                if best.as_ref().is_none_or(|(b, _)| val_ll > *b) {
                    best = Some((val_ll, row));
                }
            }
            None => rows.push(row),
        }
    }
    if let Some((_, row)) = best {
        rows.push(row);
    }
    Ok(rows)
}

struct Prepared {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

fn prepare(ds: &Dataset, sp: &Split) -> Result<Prepared> {
    let train_raw = ds.select(&sp.train);
    let norm = Normalizer::fit(&train_raw)?;
    Ok(Prepared {
        train: norm.transform(&train_raw),
        validation: norm.transform(&ds.select(&sp.validation)),
        test: norm.transform(&ds.select(&sp.test)),
    })
}

fn run_misspec(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let n = cfg.data.n.unwrap_or(2048);
    let gen = cfg.generator_hp();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let base = sample_gp_dataset(n, cfg.data.dim, &gen, cfg.data.generator_kernel, seed)?;
        let sp = split(n, &cfg.split_spec([1.0, 1.0, 0.0], seed))?;
        // every warp is the identity at γ = 0, so that fit is shared
        let mut identity: Option<Vec<ResultRow>> = None;
        for &warp in &cfg.data.warps {
            for &gamma in &cfg.data.gammas {
                let tag = ResultRow {
                    warp: Some(warp.name().into()),
                    gamma: Some(gamma),
                    ..Default::default()
                };
                if gamma == 0.0 {
                    if let Some(prev) = &identity {
                        rows.extend(prev.iter().map(|r| ResultRow {
                            warp: tag.warp.clone(),
                            ..r.clone()
                        }));
                        continue;
                    }
                }
                let x = apply_warp(&base.x, WarpSpec { kind: warp, gamma })?;
                let p = prepare(&Dataset::new(x, base.y.clone())?, &sp)?;
                let mut batch = Vec::new();
                for &m in &cfg.methods {
                    batch.extend(run_method(
                        cfg,
                        m,
                        seed,
                        &cfg.ks(),
                        &p.train,
                        Some(&p.validation),
                        &p.test,
                        cfg.data.model_kernel,
                        &tag,
                    )?);
                }
                if gamma == 0.0 {
                    identity = Some(batch.clone());
                }
                rows.extend(batch);
            }
        }
    }
    Ok(rows)
}

fn run_ksweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let n = cfg.data.n.unwrap_or(1024);
    let gen = cfg.generator_hp();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let base = sample_gp_dataset(n, cfg.data.dim, &gen, cfg.data.generator_kernel, seed)?;
        let sp = split(n, &cfg.split_spec([15.0, 3.0, 2.0], seed))?;
        let p = prepare(&base, &sp)?;
        for &m in &cfg.methods {
            // the sweep reports every k rather than selecting one
            rows.extend(run_method(
                cfg,
                m,
                seed,
                &cfg.ks(),
                &p.train,
                None,
                &p.test,
                cfg.data.model_kernel,
                &ResultRow::default(),
            )?);
        }
    }
    Ok(rows)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn run_runtime(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let gen = cfg.generator_hp();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let base = sample_gp_dataset(cfg.data.base_n, cfg.data.dim, &gen, cfg.data.generator_kernel, seed)?;
        let (base, _) = normalize(&base)?;
        for &n in &cfg.data.sizes {
            let ds = enlarge(&base, n, cfg.data.enlarge_noise, seed ^ ENLARGE_SALT)?;
            for &m in &cfg.methods {
                for &k in &cfg.ks() {
                    let tc = cfg.train_cfg(m, k, seed);
                    let fitted = fit(m, &ds, cfg.data.model_kernel, &tc)
                        .map_err(|e| e.context(format!("method {m}, seed {seed}, n {n}")))?;
                    rows.push(ResultRow {
                        method: m.name().into(),
                        seed,
                        k: Some(k),
                        n: Some(n),
                        step_seconds: Some(median(&fitted.trace.step_seconds)),
                        train_seconds: fitted.trace.total_seconds(),
                        nn_seconds: fitted.trace.rebuild_total(),
                        ..Default::default()
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn run_degenerate(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let n = cfg.data.n.unwrap_or(512);
    let gen = cfg.generator_hp();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let base = sample_gp_dataset(n, cfg.data.dim, &gen, cfg.data.generator_kernel, seed)?;
        let sp = split(n, &cfg.split_spec([15.0, 3.0, 2.0], seed))?;
        let p = prepare(&base, &sp)?;
        let augmented = degenerate_augment(&p.train, seed ^ AUGMENT_SALT);
        for (name, train) in [("original", &p.train), ("augmented", &augmented)] {
            let tag = ResultRow {
                dataset: Some(name.into()),
                n: Some(train.len()),
                ..Default::default()
            };
            for &m in &cfg.methods {
                rows.extend(run_method(
                    cfg,
                    m,
                    seed,
                    &cfg.ks(),
                    train,
                    Some(&p.validation),
                    &p.test,
                    cfg.data.model_kernel,
                    &tag,
                )?);
            }
        }
    }
    Ok(rows)
}

fn run_custom(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let path = cfg.data.path.as_ref().expect("validated");
    let table = read_csv_table(path)?;
    let n = table.x.rows();
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let sp = split(n, &cfg.split_spec([15.0, 3.0, 2.0], seed))?;
        match cfg.data.task {
            Task::Reg => {
                let y = table
                    .regression_targets()?
                    .ok_or_else(|| GpError::Format(format!("{}: no 'y' column", path.display())))?;
                let p = prepare(&Dataset::new(table.x.clone(), y)?, &sp)?;
                for &m in &cfg.methods {
                    rows.extend(run_method(
                        cfg,
                        m,
                        seed,
                        &cfg.ks(),
                        &p.train,
                        Some(&p.validation),
                        &p.test,
                        cfg.data.model_kernel,
                        &ResultRow::default(),
                    )?);
                }
            }
            Task::Bin | Task::Multi => rows.extend(run_custom_classification(cfg, &table, &sp, seed)?),
        }
    }
    Ok(rows)
}

fn run_custom_classification(
    cfg: &ExperimentConfig,
    table: &super::data::CsvTable,
    sp: &Split,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let raw = table
        .labels()?
        .ok_or_else(|| GpError::Format("classification data needs a 'label' column".into()))?;
    let xt = table.x.select_rows(&sp.train);
    let dummy = Dataset::new(xt.clone(), vec![0.0; xt.rows()])?;
    let norm = Normalizer::fit(&dummy)?;
    let x_train = norm.transform_x(&xt);
    let x_val = norm.transform_x(&table.x.select_rows(&sp.validation));
    let x_test = norm.transform_x(&table.x.select_rows(&sp.test));
    let gh = GHRule::new(DEFAULT_QUADRATURE)?;
    let kind = cfg.data.model_kernel;
    let pick = |idx: &[usize], all: &[f64]| idx.iter().map(|&i| all[i]).collect::<Vec<_>>();
    let pick_u = |idx: &[usize], all: &[usize]| idx.iter().map(|&i| all[i]).collect::<Vec<_>>();

    let mut best: Option<(f64, ResultRow)> = None;
    let mut rows = Vec::new();
    let ks = cfg.ks();
    for &k in &ks {
        let tc = cfg.train_cfg(Method::LooK, k, seed);
        let ctx = |e: GpError| e.context(format!("classifier, seed {seed}, k {k}"));
        let (val_m, test_m, trace) = if cfg.data.task == Task::Bin {
            let y = parse_binary_labels(raw)?;
            let ds = ClassDataset::binary(x_train.clone(), &pick(&sp.train, &y))?;
            let (st, trace) = train_binary(&ds, kind, &tc).map_err(ctx)?;
            let idx = st.build_index(ds.x(), tc.backend)?;
            let eval = |x: &Matrix, labels: &[f64]| -> Result<Option<MetricsReport>> {
                if labels.is_empty() {
                    return Ok(None);
                }
                let p = predict_binary(&st, &ds, &idx, x, &gh, seed ^ PREDICT_SALT)?;
                evaluate_binary(&p, labels).map(Some)
            };
            (
                eval(&x_val, &pick(&sp.validation, &y))?,
                eval(&x_test, &pick(&sp.test, &y))?,
                trace,
            )
        } else {
            let (cls, names) = encode_classes(raw);
            let ds = ClassDataset::multiclass(x_train.clone(), &pick_u(&sp.train, &cls), names.len())?;
            let (st, trace) = train_multiclass(&ds, kind, &tc).map_err(ctx)?;
            let idx = st.build_index(ds.x(), tc.backend)?;
            let eval = |x: &Matrix, labels: &[usize]| -> Result<Option<MetricsReport>> {
                if labels.is_empty() {
                    return Ok(None);
                }
                let p = multiclass_predict(&st, &ds, &idx, x, &gh, seed ^ PREDICT_SALT)?;
                evaluate_classification(&p, labels).map(Some)
            };
            (
                eval(&x_val, &pick_u(&sp.validation, &cls))?,
                eval(&x_test, &pick_u(&sp.test, &cls))?,
                trace,
            )
        };
        let row = ResultRow {
            method: Method::LooK.name().into(),
            seed,
            k: Some(k),
            metrics: test_m,
            train_seconds: trace.total_seconds(),
            nn_seconds: trace.rebuild_total(),
            ..Default::default()
        };
        match val_m.filter(|_| ks.len() > 1) {
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _)| -v.nll > *b) {
                    best = Some((-v.nll, row));
                }
            }
            None => rows.push(row),
        }
    }
    if let Some((_, row)) = best {
        rows.push(row);
    }
    Ok(rows)
}

/// Grouping key of a row: every identifying column except the seed.
fn group_key(kind: ExperimentKind, r: &ResultRow) -> Vec<String> {
    columns(kind)
        .iter()
        .filter(|c| matches!(**c, "method" | "k" | "warp" | "gamma" | "n" | "dataset"))
        .map(|c| r.cell(c))
        .collect()
}

fn mean_se(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Seed-aggregated mean and standard error of each metric column.
fn summary_csv(kind: ExperimentKind, rows: &[ResultRow]) -> Result<String> {
    let keys: Vec<&str> = columns(kind)
        .iter()
        .copied()
        .filter(|c| matches!(*c, "method" | "k" | "warp" | "gamma" | "n" | "dataset"))
        .collect();
    let metrics: Vec<&str> = columns(kind)
        .iter()
        .copied()
        .filter(|c| !keys.contains(c) && *c != "seed")
        .collect();
    let mut groups: Vec<(Vec<String>, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        let key = group_key(kind, r);
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = keys.iter().map(|s| s.to_string()).collect();
    header.push("seeds".into());
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_se"));
    }
    w.write_record(&header)?;
    for (key, members) in &groups {
        let mut rec = key.clone();
        rec.push(members.len().to_string());
        for m in &metrics {
            let vals: Vec<f64> = members.iter().filter_map(|r| r.cell(m).parse::<f64>().ok()).collect();
            if vals.is_empty() {
                rec.push(String::new());
                rec.push(String::new());
            } else {
                let (mean, se) = mean_se(&vals);
                rec.push(mean.to_string());
                rec.push(se.map(|s| s.to_string()).unwrap_or_default());
            }
        }
        w.write_record(&rec)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| GpError::Format(e.to_string()))?)
        .map_err(|e| GpError::Format(e.to_string()))
}

/// Results rows as CSV text with the experiment's columns.
pub fn results_csv(kind: ExperimentKind, rows: &[ResultRow]) -> Result<String> {
    let cols = columns(kind);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(cols)?;
    for r in rows {
        w.write_record(cols.iter().map(|c| r.cell(c)))?;
    }
    String::from_utf8(w.into_inner().map_err(|e| GpError::Format(e.to_string()))?)
        .map_err(|e| GpError::Format(e.to_string()))
}

/// Removes timing columns from CSV text, for determinism comparisons.
pub fn strip_timing_columns(text: &str) -> Result<String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut keep: Option<Vec<bool>> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let mask = keep.get_or_insert_with(|| rec.iter().map(|h| !is_timing_column(h)).collect());
        w.write_record(rec.iter().zip(mask.iter()).filter(|(_, k)| **k).map(|(v, _)| v))?;
    }
    String::from_utf8(w.into_inner().map_err(|e| GpError::Format(e.to_string()))?)
        .map_err(|e| GpError::Format(e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GpError::io(path, e))
}

fn series_by(
    rows: &[ResultRow],
    filter: impl Fn(&ResultRow) -> bool,
    x: impl Fn(&ResultRow) -> Option<f64>,
    y: impl Fn(&ResultRow) -> Option<f64>,
) -> Vec<Series> {
    let mut acc: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| filter(r)) {
        if let (Some(xv), Some(yv)) = (x(r), y(r)) {
            acc.entry(r.method.clone()).or_default().entry(xv.to_bits()).or_default().push(yv);
        }
    }
    acc.into_iter()
        .map(|(name, pts)| {
            let mut points: Vec<(f64, f64)> = pts
                .into_iter()
                .map(|(xb, ys)| (f64::from_bits(xb), ys.iter().sum::<f64>() / ys.len() as f64))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect()
}

fn make_plots(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output_dir;
    let mut out = Vec::new();
    match cfg.experiment {
        ExperimentKind::Misspec => {
            for w in &cfg.data.warps {
                let path = dir.join(format!("misspec_{}.svg", w.name()));
                let s = series_by(
                    rows,
                    |r| r.warp.as_deref() == Some(w.name()),
                    |r| r.gamma,
                    ResultRow::test_ll,
                );
                line_plot(&path, &format!("warp {}", w.name()), "gamma", "test log likelihood", &s)?;
                out.push(path);
            }
        }
        ExperimentKind::Ksweep => {
            let path = dir.join("ksweep.svg");
            let s = series_by(rows, |_| true, |r| r.k.map(|k| k as f64), ResultRow::test_ll);
            line_plot(&path, "k sweep", "k", "test log likelihood", &s)?;
            out.push(path);
        }
        ExperimentKind::Runtime => {
            let path = dir.join("runtime.svg");
            let s = series_by(rows, |_| true, |r| r.n.map(|n| (n as f64).log10()), |r| r.step_seconds);
            line_plot(&path, "runtime", "log10 N", "seconds per step", &s)?;
            out.push(path);
        }
        ExperimentKind::Degenerate | ExperimentKind::Custom => {}
    }
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config: &'a ExperimentConfig,
    rows: usize,
    results_csv: String,
    summary_csv: String,
    plots: Vec<String>,
    timing_columns: Vec<&'a str>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Runs the experiment described by `cfg` and writes
/// `<experiment>_results.csv`, `<experiment>_summary.csv`,
/// `<experiment>_manifest.json` and optional SVG plots to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let start = Instant::now();
    let rows = match cfg.experiment {
        ExperimentKind::Misspec => run_misspec(cfg)?,
        ExperimentKind::Ksweep => run_ksweep(cfg)?,
        ExperimentKind::Runtime => run_runtime(cfg)?,
        ExperimentKind::Degenerate => run_degenerate(cfg)?,
        ExperimentKind::Custom => run_custom(cfg)?,
    };
    let _ = start.elapsed();
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| GpError::io(dir, e))?;
    let name = cfg.experiment.name();
    let results_path = dir.join(format!("{name}_results.csv"));
    let summary_path = dir.join(format!("{name}_summary.csv"));
    let manifest_path = dir.join(format!("{name}_manifest.json"));
    write(&results_path, &results_csv(cfg.experiment, &rows)?)?;
    write(&summary_path, &summary_csv(cfg.experiment, &rows)?)?;
    let plots = if cfg.plots { make_plots(cfg, &rows)? } else { Vec::new() };
    let manifest = Manifest {
        experiment: name,
        config: cfg,
        rows: rows.len(),
        results_csv: file_name(&results_path),
        summary_csv: file_name(&summary_path),
        plots: plots.iter().map(|p| file_name(p)).collect(),
        timing_columns: columns(cfg.experiment).iter().copied().filter(|c| is_timing_column(c)).collect(),
    };
    write(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentResults {
        kind: cfg.experiment,
        rows,
        results_csv: results_path,
        summary_csv: summary_path,
        manifest: manifest_path,
        plots,
    })
}
