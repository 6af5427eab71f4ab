//! `loogp` command-line tool.

mod model;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use loogp::classify::{multiclass_predict, predict_binary, train_binary, train_multiclass, ClassDataset};
use loogp::gp::normal_log_density;
use loogp::harness::data::{encode_classes, parse_binary_labels, read_csv_table, CsvTable, Dataset, Normalizer};
use loogp::harness::experiment::{run_experiment, ExperimentConfig, ExperimentKind, Task};
use loogp::loo::{self, initial_hyperparams};
use loogp::pg::{GHRule, DEFAULT_QUADRATURE};
use loogp::{GpError, KernelKind, NeighborIndex, TrainConfig};

use model::{sha256_file, ModelFile, TrainingData, FORMAT, VERSION};

#[derive(Parser)]
#[command(name = "loogp", version, about = "GP hyperparameter learning with the LOO-k objective")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Reg,
    Bin,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Rbf,
    Matern52,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a CSV and write it as JSON.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Number of nearest neighbors.
        #[arg(long, value_parser = parse_k)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Training settings as JSON; `--k` takes precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "matern52")]
        kernel: KernelArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict at the points of a CSV with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training CSV, if it moved since training.
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// Run an experiment described by a JSON config.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the runtime study described by a JSON config.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Maps library errors to exit codes: numeric failures to 2, everything else to 1.
struct Failure(GpError);

impl From<GpError> for Failure {
    fn from(e: GpError) -> Self {
        Failure(e)
    }
}

fn parse_k(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("the neighbor count must be at least 1".into()),
        Ok(k) => Ok(k),
        Err(e) => Err(e.to_string()),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(GpError::InvalidConfig(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train {
            data,
            task,
            k,
            out,
            config,
            kernel,
            steps,
            seed,
        } => train(&data, task, k, &out, config.as_deref(), kernel, steps, seed),
        Command::Predict {
            model,
            data,
            out,
            train_data,
        } => predict(&model, &data, &out, train_data.as_deref()),
        Command::Experiment { config } => experiment(&config, None),
        Command::Bench { config } => experiment(&config, Some(ExperimentKind::Runtime)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| GpError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn required<T>(v: Option<T>, what: &str, path: &Path) -> Result<T, Failure> {
    v.ok_or_else(|| usage(format!("{}: missing '{what}' column", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    task: TaskArg,
    k: usize,
    out: &Path,
    config: Option<&Path>,
    kernel: KernelArg,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = load_train_config(config)?;
    cfg.k = k;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let kind = match kernel {
        KernelArg::Rbf => KernelKind::Rbf,
        KernelArg::Matern52 => KernelKind::Matern52,
    };
    let table = read_csv_table(data)?;
    let n = table.x.rows();
    if k >= n {
        return Err(usage(format!("--k must be below the number of training rows ({n}), got {k}")));
    }
    if cfg.batch_size > n {
        eprintln!("note: batch size {} exceeds the {n} training rows; using {n}", cfg.batch_size);
        cfg.batch_size = n;
    }
    let hash = sha256_file(data)?;
    let abs = std::fs::canonicalize(data).map_err(|e| GpError::io(data, e))?;

    let mut m = ModelFile {
        format: FORMAT.into(),
        version: VERSION,
        task: Task::Reg,
        kernel: kind,
        k,
        feature_names: table.feature_names.clone(),
        normalizer: Normalizer::fit(&Dataset::new(table.x.clone(), vec![0.0; n])?)?,
        hyperparams: None,
        classifier: None,
        classes: None,
        train_config: cfg.clone(),
        final_objective: None,
        training_data: TrainingData {
            path: abs,
            sha256: hash,
            rows: n,
        },
    };
    let trace = match task {
        TaskArg::Reg => {
            let y = required(table.regression_targets()?, "y", data)?;
            let ds = Dataset::new(table.x.clone(), y)?;
            let norm = Normalizer::fit(&ds)?;
            let ds = norm.transform(&ds);
            let hp0 = initial_hyperparams(ds.dim(), &ds.y);
            let (hp, trace) = loo::train(&ds.x, &ds.y, &hp0, kind, &cfg)?;
            m.normalizer = norm;
            m.hyperparams = Some(hp);
            trace
        }
        TaskArg::Bin => {
            let labels = parse_binary_labels(required(table.labels()?, "label", data)?)?;
            let ds = ClassDataset::binary(m.normalizer.transform_x(&table.x), &labels)?;
            let (state, trace) = train_binary(&ds, kind, &cfg)?;
            m.task = Task::Bin;
            m.classifier = Some(state);
            trace
        }
        TaskArg::Multi => {
            let (cls, names) = encode_classes(required(table.labels()?, "label", data)?);
            if names.len() < 2 {
                return Err(usage("multi-class training needs at least two classes"));
            }
            let ds = ClassDataset::multiclass(m.normalizer.transform_x(&table.x), &cls, names.len())?;
            let (state, trace) = train_multiclass(&ds, kind, &cfg)?;
            m.task = Task::Multi;
            m.classifier = Some(state);
            m.classes = Some(names);
            trace
        }
    };
    m.final_objective = trace.objective.last().copied();
    m.save(out)?;
    eprintln!(
        "trained {} model on {n} rows in {} steps ({:.2}s); wrote {}",
        task_name(m.task),
        trace.len(),
        trace.total_seconds(),
        out.display()
    );
    Ok(())
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Reg => "regression",
        Task::Bin => "binary",
        Task::Multi => "multi-class",
    }
}

/// Reads the training CSV referenced by the model and checks its hash.
fn training_table(m: &ModelFile, override_path: Option<&Path>) -> Result<CsvTable, Failure> {
    let path = override_path.unwrap_or(&m.training_data.path);
    let hash = sha256_file(path)?;
    if hash != m.training_data.sha256 {
        return Err(usage(format!(
            "{}: content hash differs from the data the model was trained on",
            path.display()
        )));
    }
    Ok(read_csv_table(path)?)
}

fn check_features(m: &ModelFile, t: &CsvTable, path: &Path) -> Result<(), Failure> {
    if t.feature_names != m.feature_names {
        return Err(usage(format!(
            "{}: feature columns {:?} do not match the model's {:?}",
            path.display(),
            t.feature_names,
            m.feature_names
        )));
    }
    Ok(())
}

fn predict(model_path: &Path, data: &Path, out: &Path, train_override: Option<&Path>) -> Result<(), Failure> {
    let m = ModelFile::load(model_path)?;
    let train = training_table(&m, train_override)?;
    let test = read_csv_table(data)?;
    check_features(&m, &test, data)?;
    let norm = &m.normalizer;
    let x_train = norm.transform_x(&train.x);
    let x_test = norm.transform_x(&test.x);
    let mut w = csv_writer(out)?;
    match m.task {
        Task::Reg => {
            let hp = m.hyperparams.as_ref().ok_or_else(|| usage("model has no hyperparameters"))?;
            let y_train: Vec<f64> = required(train.regression_targets()?, "y", &m.training_data.path)?
                .iter()
                .map(|v| (v - norm.y_mean) / norm.y_std)
                .collect();
            let y_test = test.regression_targets()?;
            let index = NeighborIndex::build(&x_train, &hp.log_lengthscales, m.train_config.backend)?;
            let preds = loo::predict(&x_train, &y_train, hp, m.kernel, m.k, &index, &x_test)?;
            let mut header = vec!["mean", "var"];
            if y_test.is_some() {
                header.push("nll");
            }
            write_row(&mut w, out, header.iter().map(|s| s.to_string()))?;
            for (i, p) in preds.iter().enumerate() {
                let mean = p.mean * norm.y_std + norm.y_mean;
                let var = p.var_observed * norm.y_std * norm.y_std;
                let mut row = vec![mean.to_string(), var.to_string()];
                if let Some(y) = &y_test {
                    row.push((-normal_log_density(y[i], mean, var)).to_string());
                }
                write_row(&mut w, out, row)?;
            }
        }
        Task::Bin | Task::Multi => {
            let state = m.classifier.as_ref().ok_or_else(|| usage("model has no classifier state"))?;
            let raw = required(train.labels()?, "label", &m.training_data.path)?;
            let gh = GHRule::new(DEFAULT_QUADRATURE)?;
            let seed = m.train_config.seed;
            let (probs, names): (Vec<Vec<f64>>, Vec<String>) = if m.task == Task::Bin {
                let ds = ClassDataset::binary(x_train, &parse_binary_labels(raw)?)?;
                let index = state.build_index(ds.x(), m.train_config.backend)?;
                let p = predict_binary(state, &ds, &index, &x_test, &gh, seed)?;
                (p.into_iter().map(|v| vec![1.0 - v, v]).collect(), vec!["-1".into(), "1".into()])
            } else {
                let names = m.classes.clone().ok_or_else(|| usage("model has no class names"))?;
                let (cls, _) = encode_classes(raw);
                let ds = ClassDataset::multiclass(x_train, &cls, names.len())?;
                let index = state.build_index(ds.x(), m.train_config.backend)?;
                (multiclass_predict(state, &ds, &index, &x_test, &gh, seed)?, names)
            };
            let truth = test.labels()?.map(|l| true_classes(m.task, l, &names)).transpose()?;
            let mut header: Vec<String> = names.iter().map(|c| format!("p_{c}")).collect();
            header.push("predicted".into());
            if truth.is_some() {
                header.push("nll".into());
            }
            write_row(&mut w, out, header)?;
            for (i, p) in probs.iter().enumerate() {
                let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                row.push(names[loogp::classify::argmax(p)].clone());
                if let Some(t) = &truth {
                    row.push((-p[t[i]].max(f64::MIN_POSITIVE).ln()).to_string());
                }
                write_row(&mut w, out, row)?;
            }
        }
    }
    w.flush().map_err(|e| GpError::io(out, e))?;
    eprintln!("wrote {} predictions to {}", x_test.rows(), out.display());
    Ok(())
}

/// Column index of each test label among the model's classes.
fn true_classes(task: Task, labels: &[String], names: &[String]) -> Result<Vec<usize>, Failure> {
    if task == Task::Bin {
        return Ok(parse_binary_labels(labels)?
            .into_iter()
            .map(|v| usize::from(v > 0.0))
            .collect());
    }
    labels
        .iter()
        .map(|l| {
            names
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| usage(format!("test label '{l}' was not seen in training")))
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Failure> {
    let f = std::fs::File::create(path).map_err(|e| GpError::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_row(
    w: &mut impl Write,
    path: &Path,
    cells: impl IntoIterator<Item = String>,
) -> Result<(), Failure> {
    let line = cells.into_iter().collect::<Vec<_>>().join(",");
    writeln!(w, "{line}").map_err(|e| GpError::io(path, e).into())
}

fn experiment(path: &Path, require: Option<ExperimentKind>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| GpError::io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let (Some(kind), Some(obj)) = (require, value.as_object_mut()) {
        obj.entry("experiment").or_insert_with(|| serde_json::json!(kind.name()));
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(kind) = require {
        if cfg.experiment != kind {
            return Err(usage(format!(
                "bench runs the {} study, but the config names '{}'",
                kind.name(),
                cfg.experiment.name()
            )));
        }
    }
    let res = run_experiment(&cfg)?;
    eprintln!(
        "{}: {} rows; wrote {}, {}, {}",
        cfg.experiment.name(),
        res.rows.len(),
        res.results_csv.display(),
        res.summary_csv.display(),
        res.manifest.display()
    );
    for p in &res.plots {
        eprintln!("plot: {}", p.display());
    }
    Ok(())
}
