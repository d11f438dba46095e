use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use milr_core::dataset::{load_csv, BagDataset, CsvSchema};
use milr_core::em::FitConfig;
use milr_core::model::metrics_from_scores;
use milr_core::registry::{FittedModel, FitterOptions, FitterRegistry, LambdaChoice};
use milr_core::selection::bic;
use milr_core::simulate::{
    run_comparison_experiment, run_estimation_experiment, run_selection_experiment, ExperimentManifest,
    SchemeName, SimScheme,
};
use milr_core::MilrError;

#[derive(Parser, Debug)]
#[command(name = "milr", version, about = "Multiple-instance logistic regression")]
struct Cli {
    /// Worker threads for folds and replicates. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SolverArgs {
    /// EM iteration cap.
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Convergence tolerance on the largest coefficient change.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

impl SolverArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_em_iter: self.max_iter,
            tol: self.tol,
            ..FitConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Select {
    Cv,
    Bic,
}

impl Select {
    fn name(self) -> &'static str {
        match self {
            Select::Cv => "cv",
            Select::Bic => "bic",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one model and write it as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Penalty: a non-negative number or `max`.
        #[arg(long, default_value = "0", value_parser = parse_lambda)]
        lambda: LambdaChoice,
        /// Fit on the raw feature scale.
        #[arg(long)]
        no_standardize: bool,
        /// Fitting strategy.
        #[arg(long, default_value = "milr")]
        method: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Fit the LASSO path, pick the penalty and write the report and final model.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 20)]
        grid_size: usize,
        #[arg(long, default_value_t = 0.001)]
        eps: f64,
        #[arg(long, env = "MILR_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Select::Cv)]
        select: Select,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Score bags with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Positive when the bag probability is at least this; must lie in (0, 1).
        #[arg(long, default_value_t = 0.5, value_parser = parse_threshold)]
        threshold: f64,
        /// Predictions CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a simulation experiment and write its tables.
    Simulate {
        #[arg(long, value_parser = parse_scheme)]
        scheme: SchemeName,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[arg(long, env = "MILR_SEED", default_value_t = 0)]
        seed: u64,
        /// Penalty selector for scheme A.
        #[arg(long, value_enum, default_value_t = Select::Cv)]
        select: Select,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
}

fn parse_lambda(s: &str) -> Result<LambdaChoice, String> {
    s.parse().map_err(|e: MilrError| e.to_string())
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if t > 0.0 && t < 1.0 {
        Ok(t)
    } else {
        Err(format!("threshold must lie strictly between 0 and 1, got {t}"))
    }
}

fn parse_scheme(s: &str) -> Result<SchemeName, String> {
    s.parse().map_err(|e: MilrError| e.to_string())
}

enum Failure {
    /// Bad invocation or missing input: exit code 2.
    Usage(String),
    /// Anything that went wrong while computing: exit code 1.
    Runtime(String),
}

impl From<MilrError> for Failure {
    fn from(e: MilrError) -> Self {
        match e {
            MilrError::UnknownStrategy { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    version: String,
    jobs: u16,
    timing_secs: BTreeMap<String, f64>,
    outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    experiment: Option<ExperimentManifest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<serde_json::Value>,
}

impl RunManifest {
    fn new(command: &str, jobs: u16, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            jobs,
            timing_secs: BTreeMap::new(),
            outputs: Vec::new(),
            experiment: None,
            metrics: None,
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timing_secs.insert(phase.to_string(), start.elapsed().as_secs_f64());
        out
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable config")
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input file not found: {}", path.display())))
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load(path: &Path, schema: &CsvSchema) -> CliResult<BagDataset> {
    require_file(path)?;
    Ok(load_csv(path, schema)?)
}

/// `<out>.manifest.json` next to a single output file.
fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_fit(
    jobs: u16,
    data: &Path,
    lambda: LambdaChoice,
    no_standardize: bool,
    method: &str,
    out: &Path,
    solver: &SolverArgs,
) -> CliResult<()> {
    let opts = FitterOptions {
        cfg: solver.config(),
        standardize: !no_standardize,
        lambda,
        ..FitterOptions::default()
    };
    let mut manifest = RunManifest::new(
        "fit",
        jobs,
        serde_json::json!({ "data": data, "method": method, "options": to_value(&opts) }),
    );
    let ds = manifest.time("load", || load(data, &CsvSchema::default()))?;
    let registry = FitterRegistry::with_defaults(&opts);
    let fitter = registry.get(method)?;
    let model = manifest.time("fit", || fitter.fit(&ds))?;
    if !model.fit.converged {
        log::warn!("fit stopped after {} iterations without converging", model.fit.iterations);
    }
    write_json(out, &model)?;
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&manifest_path(out))
}

#[derive(Serialize)]
struct BicRow {
    lambda: f64,
    bic: Option<f64>,
    nonzero: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_cv(
    jobs: u16,
    data: &Path,
    folds: usize,
    grid_size: usize,
    eps: f64,
    seed: u64,
    select: Select,
    out_dir: &Path,
    solver: &SolverArgs,
) -> CliResult<()> {
    let opts = FitterOptions {
        cfg: solver.config(),
        grid_size,
        eps,
        folds,
        seed,
        ..FitterOptions::default()
    };
    let mut manifest = RunManifest::new(
        "cv",
        jobs,
        serde_json::json!({ "data": data, "select": select, "options": to_value(&opts) }),
    );
    manifest.seeds.insert("folds".into(), seed);
    let ds = manifest.time("load", || load(data, &CsvSchema::default()))?;
    create_dir(out_dir)?;
    let registry = FitterRegistry::with_defaults(&opts);
    let fitter = registry.get(&format!("milr-lasso-{}", select.name()))?;
    let model = manifest.time("path_and_selection", || fitter.fit(&ds))?;

    let outcome = model.selection.as_ref().expect("lasso fitters record their selection");
    if let Some(report) = &outcome.cv_report {
        let csv = out_dir.join("cv_report.csv");
        report.save_csv(&csv)?;
        let json = out_dir.join("cv_report.json");
        write_json(&json, report)?;
        manifest.outputs.extend([csv, json]);
    } else {
        let path = model.path.as_ref().expect("lasso fitters keep their path");
        let standardized = match &model.standardization {
            Some(stats) => stats.apply(&ds)?,
            None => ds.clone(),
        };
        let rows: Vec<BicRow> = path
            .entries
            .iter()
            .map(|e| BicRow {
                lambda: e.lambda,
                bic: e.fit.as_ref().map(|f| bic(f, &standardized)),
                nonzero: e.fit.as_ref().map(|f| f.coef.n_nonzero()),
            })
            .collect();
        let json = out_dir.join("bic_report.json");
        write_json(&json, &rows)?;
        manifest.outputs.push(json);
    }
    let model_path = out_dir.join("model.json");
    write_json(&model_path, &model)?;
    manifest.outputs.push(model_path);
    info!(
        "selected lambda {} ({} nonzero slopes)",
        outcome.selection.lambda,
        model.coef.n_nonzero()
    );
    manifest.write(&out_dir.join("manifest.json"))
}

fn cmd_predict(jobs: u16, model_path: &Path, data: &Path, threshold: f64, out: Option<&Path>) -> CliResult<()> {
    let mut manifest = RunManifest::new(
        "predict",
        jobs,
        serde_json::json!({ "model": model_path, "data": data, "threshold": threshold }),
    );
    require_file(model_path)?;
    let text = fs::read_to_string(model_path)
        .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", model_path.display())))?;
    let model: FittedModel = serde_json::from_str(&text).map_err(|e| Failure::Runtime(e.to_string()))?;
    let ds = load(data, &CsvSchema::default().allowing_missing_labels())?;
    let probs = manifest.time("predict", || model.predict_proba(&ds))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["bag_id", "pi_hat", "z_hat"];
    if ds.labeled {
        header.push("label");
    }
    let write_err = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(&header).map_err(write_err)?;
    for (bag, p) in ds.bags.iter().zip(&probs) {
        let mut row = vec![bag.id.clone(), p.to_string(), u8::from(*p >= threshold).to_string()];
        if ds.labeled {
            row.push(u8::from(bag.label).to_string());
        }
        w.write_record(&row).map_err(write_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;

    if ds.labeled {
        match metrics_from_scores(&probs, &ds.labels(), threshold) {
            Ok(m) => {
                eprintln!("ACC {} AUC {}", m.acc, m.auc);
                manifest.metrics = Some(to_value(&m));
            }
            Err(e) => eprintln!("metrics unavailable: {e}"),
        }
    }
    match out {
        Some(path) => {
            fs::write(path, &bytes).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
            manifest.outputs.push(path.to_path_buf());
            manifest.write(&manifest_path(path))
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Failure::Runtime(e.to_string()))
        }
    }
}

fn cmd_simulate(
    jobs: u16,
    scheme: SchemeName,
    replicates: usize,
    seed: u64,
    select: Select,
    out_dir: &Path,
    solver: &SolverArgs,
) -> CliResult<()> {
    let cfg = solver.config();
    let opts = FitterOptions {
        cfg,
        ..FitterOptions::default()
    };
    let mut manifest = RunManifest::new(
        "simulate",
        jobs,
        serde_json::json!({ "scheme": scheme, "replicates": replicates, "select": select, "options": to_value(&opts) }),
    );
    manifest.seeds.insert("experiment".into(), seed);
    create_dir(out_dir)?;
    let preset = SimScheme::preset(scheme);
    let stem = format!("{}_{scheme}", match scheme {
        SchemeName::Table1 => "estimation",
        SchemeName::A => "selection",
        _ => "comparison",
    });
    let csv = out_dir.join(format!("{stem}.csv"));
    let json = out_dir.join(format!("{stem}.json"));
    let (experiment, regenerations) = match scheme {
        SchemeName::Table1 => {
            let r = manifest.time("experiment", || run_estimation_experiment(replicates, seed, &cfg))?;
            r.save_csv(&csv)?;
            write_json(&json, &r)?;
            ("estimation", r.regenerations)
        }
        SchemeName::A => {
            let r = manifest.time("experiment", || run_selection_experiment(replicates, seed, select.name(), &opts))?;
            r.save_csv(&csv)?;
            write_json(&json, &r)?;
            ("selection", r.regenerations)
        }
        _ => {
            let r = manifest.time("experiment", || run_comparison_experiment(scheme, replicates, seed, &opts))?;
            r.save_csv(&csv)?;
            write_json(&json, &r)?;
            ("comparison", r.regenerations)
        }
    };
    manifest.outputs.extend([csv, json]);
    manifest.experiment = Some(ExperimentManifest::new(experiment, &preset, seed, replicates, regenerations));
    manifest.write(&out_dir.join("manifest.json"))
}

fn run(cli: Cli) -> CliResult<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let jobs = cli.jobs;
    pool.install(|| match &cli.command {
        Command::Fit {
            data,
            lambda,
            no_standardize,
            method,
            out,
            solver,
        } => cmd_fit(jobs, data, *lambda, *no_standardize, method, out, solver),
        Command::Cv {
            data,
            folds,
            grid_size,
            eps,
            seed,
            select,
            out_dir,
            solver,
        } => cmd_cv(jobs, data, *folds, *grid_size, *eps, *seed, *select, out_dir, solver),
        Command::Predict {
            model,
            data,
            threshold,
            out,
        } => cmd_predict(jobs, model, data, *threshold, out.as_deref()),
        Command::Simulate {
            scheme,
            replicates,
            seed,
            select,
            out_dir,
            solver,
        } => cmd_simulate(jobs, *scheme, *replicates, *seed, *select, out_dir, solver),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
