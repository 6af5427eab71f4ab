//! Synthetic data, input warps, duplication, normalization, splits and CSV
//! ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::kernels::{kernel_matrix, Hyperparams, KernelKind};
use crate::linalg::{factor_with_jitter, Matrix, BASE_JITTER};

/// Largest data set the dense generator will factorize.
pub const GENERATOR_MAX_N: usize = 16384;
/// Standard deviation of the replicate noise in [`degenerate_augment`].
pub const DUPLICATE_NOISE_SD: f64 = 1e-2;

/// Regression inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        check_dim(x.rows(), y.len())?;
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Draws `n` inputs uniformly from `[−1, 1]^dim` and targets from the GP
/// prior given by `hp` and `kind`, plus observation noise.
pub fn sample_gp_dataset(n: usize, dim: usize, hp: &Hyperparams, kind: KernelKind, seed: u64) -> Result<Dataset> {
    if n > GENERATOR_MAX_N {
        return Err(GpError::SizeGuard {
            what: "generated data points",
            value: n,
            limit: GENERATOR_MAX_N,
        });
    }
    check_dim(dim, hp.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..=1.0));
    if n == 0 {
        return Ok(Dataset { x, y: Vec::new() });
    }
    let k = kernel_matrix(&x, &x, hp, kind)?;
    let (chol, _) = factor_with_jitter(&k, BASE_JITTER * hp.kernel_var())?;
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let sd = hp.noise_var().sqrt();
    let y = (0..n)
        .map(|i| {
            let f: f64 = (0..=i).map(|j| chol.lower(i, j) * z[j]).sum();
            let e: f64 = rng.sample(StandardNormal);
            hp.mean_const + f + sd * e
        })
        .collect();
    Ok(Dataset { x, y })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpKind {
    /// `x → (1+γ)x` for `x < 0`.
    NegStretch,
    /// `x → x^(1+γ)` for `x > 0`.
    PosPower,
    /// `x → x + γx³`.
    Cubic,
}

impl WarpKind {
    pub fn name(self) -> &'static str {
        match self {
            WarpKind::NegStretch => "negstretch",
            WarpKind::PosPower => "pospower",
            WarpKind::Cubic => "cubic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub kind: WarpKind,
    pub gamma: f64,
}

/// Applies the coordinatewise warp; `gamma = 0` is the identity.
pub fn apply_warp(x: &Matrix, w: WarpSpec) -> Result<Matrix> {
    if !(w.gamma >= 0.0) {
        return Err(GpError::InvalidConfig(format!("warp gamma must be nonnegative, got {}", w.gamma)));
    }
    let g = w.gamma;
    let f = |v: f64| match w.kind {
        WarpKind::NegStretch if v < 0.0 => (1.0 + g) * v,
        WarpKind::PosPower if v > 0.0 => v.powf(1.0 + g),
        WarpKind::Cubic => v + g * v * v * v,
        _ => v,
    };
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| f(x[(i, j)])))
}

/// Returns the original points followed by one noisy replicate of each, with
/// independent N(0, 1e-4) noise on every input coordinate and on the target.
pub fn degenerate_augment(ds: &Dataset, seed: u64) -> Dataset {
    let (n, d) = (ds.len(), ds.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ds.x.as_slice().to_vec();
    let mut y = ds.y.clone();
    for i in 0..n {
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            data.push(ds.x[(i, j)] + DUPLICATE_NOISE_SD * e);
        }
        let e: f64 = rng.sample(StandardNormal);
        y.push(ds.y[i] + DUPLICATE_NOISE_SD * e);
    }
    Dataset {
        x: Matrix::from_vec(2 * n, d, data).expect("shape matches by construction"),
        y,
    }
}

/// Enlarges `base` to `n` points by cycling through it and perturbing every
/// copy with N(0, sd²) noise on inputs and targets.
pub fn enlarge(base: &Dataset, n: usize, sd: f64, seed: u64) -> Result<Dataset> {
    if base.is_empty() {
        return Err(GpError::EmptyData);
    }
    let d = base.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let src = i % base.len();
        let exact = i < base.len();
        for j in 0..d {
            let e: f64 = if exact { 0.0 } else { rng.sample(StandardNormal) };
            data.push(base.x[(src, j)] + sd * e);
        }
        let e: f64 = if exact { 0.0 } else { rng.sample(StandardNormal) };
        y.push(base.y[src] + sd * e);
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, y)
}

/// Train:test:validation proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 15.0,
            test: 3.0,
            validation: 2.0,
            seed: 0,
        }
    }
}

/// Disjoint index sets covering `[0, N)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffles `[0, n)` with the spec's seed and cuts it by proportion.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    let props = [spec.train, spec.test, spec.validation];
    if props.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || !(spec.train > 0.0) || !(spec.test > 0.0) {
        return Err(GpError::InvalidConfig(
            "split proportions must be finite, train and test positive".into(),
        ));
    }
    let total: f64 = props.iter().sum();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((n as f64) * spec.train / total).round() as usize;
    let n_test = (((n as f64) * spec.test / total).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..n_train + n_test].to_vec();
    let mut validation = perm[n_train + n_test..].to_vec();
    if spec.validation == 0.0 {
        test.append(&mut validation);
    }
    train.sort_unstable();
    test.sort_unstable();
    validation.sort_unstable();
    Ok(Split { train, test, validation })
}

/// Per-column affine transform fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    /// Input columns with zero variance, passed through unchanged.
    pub constant_columns: Vec<usize>,
    /// Whether the targets had zero variance and were passed through.
    pub constant_target: bool,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Normalizer {
    /// Centers targets to mean 0 and variance 1 (so the zero predictor has
    /// unit MSE) and standardizes each input column.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(GpError::EmptyData);
        }
        let d = ds.dim();
        let (mut x_mean, mut x_std, mut constant_columns) = (vec![0.0; d], vec![1.0; d], Vec::new());
        for j in 0..d {
            let (m, s) = mean_std((0..ds.len()).map(|i| ds.x[(i, j)]));
            if s > 0.0 {
                x_mean[j] = m;
                x_std[j] = s;
            } else {
                constant_columns.push(j);
            }
        }
        let (ym, ys) = mean_std(ds.y.iter().copied());
        let constant_target = !(ys > 0.0);
        Ok(Self {
            x_mean,
            x_std,
            y_mean: if constant_target { 0.0 } else { ym },
            y_std: if constant_target { 1.0 } else { ys },
            constant_columns,
            constant_target,
        })
    }

    pub fn transform_x(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn transform(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: self.transform_x(&ds.x),
            y: ds.y.iter().map(|v| (v - self.y_mean) / self.y_std).collect(),
        }
    }
}

/// Fits a [`Normalizer`] on `ds` and returns the transformed copy.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, Normalizer)> {
    let t = Normalizer::fit(ds)?;
    Ok((t.transform(ds), t))
}

/// A parsed data CSV: feature columns plus an optional target column.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub feature_names: Vec<String>,
    pub x: Matrix,
    /// Name of the target column found (`"y"` or `"label"`), if any.
    pub target_name: Option<String>,
    pub target: Option<Vec<String>>,
}

/// Reads a header-row CSV whose target column is named `"y"` or `"label"`
/// (optional) and whose other columns are numeric features.
pub fn read_csv_table(path: &Path) -> Result<CsvTable> {
    let file = std::fs::File::open(path).map_err(|e| GpError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let target_col = headers.iter().position(|h| h == "y" || h == "label");
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != target_col).collect();
    if feature_cols.is_empty() {
        return Err(GpError::Format(format!("{}: no feature columns", path.display())));
    }
    let mut data = Vec::new();
    let mut target = Vec::new();
    let mut rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for &c in &feature_cols {
            let v = rec.get(c).unwrap_or("");
            let parsed: f64 = v.parse().map_err(|_| {
                GpError::Format(format!(
                    "{}: row {}, column '{}': '{v}' is not a number",
                    path.display(),
                    line + 2,
                    headers[c]
                ))
            })?;
            data.push(parsed);
        }
        if let Some(c) = target_col {
            target.push(rec.get(c).unwrap_or("").to_string());
        }
        rows += 1;
    }
    Ok(CsvTable {
        feature_names: feature_cols.iter().map(|&c| headers[c].clone()).collect(),
        x: Matrix::from_vec(rows, feature_cols.len(), data)?,
        target_name: target_col.map(|c| headers[c].clone()),
        target: target_col.map(|_| target),
    })
}

impl CsvTable {
    /// Numeric regression targets from the `"y"` column.
    pub fn regression_targets(&self) -> Result<Option<Vec<f64>>> {
        match (&self.target_name, &self.target) {
            (Some(name), Some(t)) if name == "y" => t
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| GpError::Format(format!("target '{v}' is not a number")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            (Some(name), _) => Err(GpError::Format(format!(
                "regression data needs a 'y' column, found '{name}'"
            ))),
            _ => Ok(None),
        }
    }

    /// Raw class labels from the `"label"` column.
    pub fn labels(&self) -> Result<Option<&[String]>> {
        match (&self.target_name, &self.target) {
            (Some(name), Some(t)) if name == "label" => Ok(Some(t)),
            (Some(name), _) => Err(GpError::Format(format!(
                "classification data needs a 'label' column, found '{name}'"
            ))),
            _ => Ok(None),
        }
    }
}

/// Binary labels given as ±1 or 0/1, mapped to ±1.
pub fn parse_binary_labels(raw: &[String]) -> Result<Vec<f64>> {
    raw.iter()
        .map(|s| match s.parse::<f64>() {
            Ok(v) if v == 1.0 => Ok(1.0),
            Ok(v) if v == -1.0 || v == 0.0 => Ok(-1.0),
            _ => Err(GpError::Format(format!("binary label '{s}' is not one of -1, 0, 1"))),
        })
        .collect()
}

/// Maps string labels to indices into their sorted unique values.
pub fn encode_classes(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let classes: Vec<String> = raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = raw
        .iter()
        .map(|s| classes.binary_search(s).expect("label present by construction"))
        .collect();
    (idx, classes)
}
