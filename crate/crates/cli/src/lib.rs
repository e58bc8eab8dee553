//! The `sagp` command-line tool.
//!
//! [`run`] parses arguments, dispatches to a subcommand and maps failures to
//! exit codes: 0 on success, 2 for usage and configuration problems, 3 for
//! data problems, 4 for numerical failures. Errors are reported on stderr as a
//! single line `sagp: error[<kind>]: <message>`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sagp::data::{load_columns, write_raw_csv, write_table};
use sagp::persist::{load_run, save_run};
use sagp::simulate::METRICS;
use sagp::{
    complexity_estimate, coverage, cv_select_layers, generate, load_csv, mean_interval_score, mse, run_study,
    Dataset, ErrorKind, PredictionResult, Result, RunConfig, SagpError, SimScenario, Split, StudyConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "sagp", version, about = "Sparse additive Gaussian process regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and save the run directory.
    Fit(FitArgs),
    /// Predict from a saved run at new locations.
    Predict(PredictArgs),
    /// Choose the number of layers by k-fold cross-validation.
    Cv(CvArgs),
    /// Generate one simulated train/test split.
    Simulate(SimulateArgs),
    /// Run the repeated simulation study.
    Study(StudyArgs),
    /// Score a prediction file against held-out responses.
    Metrics(MetricsArgs),
    /// Show the pruned partition for a dataset.
    PruneInfo(PruneArgs),
}

/// Configuration sources shared by the fitting subcommands. Later sources win:
/// defaults, `--config`, `--set`, then the dedicated flags.
#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Pseudo-inputs per component.
    #[arg(long)]
    m: Option<usize>,
    /// Branching factors, one value or one per dimension (comma separated).
    #[arg(long)]
    branching: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Training CSV with columns x1..xd and y.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of layers.
    #[arg(long = "L", visible_alias = "layers")]
    layers: Option<usize>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Run directory written by `fit`.
    #[arg(long)]
    run: PathBuf,
    /// CSV of locations with columns x1..xd.
    #[arg(long)]
    at: PathBuf,
    /// Miscoverage level; defaults to the run's setting.
    #[arg(long)]
    alpha: Option<f64>,
    /// Seed of the predictive draws; defaults to the run's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Append the posterior mean of every active component.
    #[arg(long)]
    components: bool,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Candidate layer counts: a range `1..4` (inclusive) or a list `1,2,3`.
    #[arg(long = "L", visible_alias = "layers", default_value = "1..4")]
    layers: String,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Pick the shallowest depth within one standard error of the best.
    #[arg(long)]
    one_se: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// `random` or `interval`.
    #[arg(long, default_value = "random")]
    scenario: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 150)]
    train_size: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_var: f64,
}

impl ScenarioArgs {
    fn scenario(&self, seed: u64) -> Result<SimScenario> {
        Ok(SimScenario {
            n: self.n,
            noise_var: self.noise_var,
            split: self.scenario.parse::<Split>()?,
            train_size: self.train_size,
            seed,
        })
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Directory receiving train.csv and test.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long, default_value_t = 20)]
    batches: usize,
    /// Configurations as `m:L` pairs, comma separated.
    #[arg(long, default_value = "5:4,10:3,15:3")]
    configs: String,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory receiving study.csv, summary.csv and failures.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Prediction CSV with mean, lower and upper columns.
    #[arg(long)]
    pred: PathBuf,
    /// CSV with a y column, rows aligned with the predictions.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "L", visible_alias = "layers")]
    layers: Option<usize>,
}

fn usage(msg: impl Into<String>) -> SagpError {
    SagpError::Config(vec![msg.into()])
}

impl ModelArgs {
    fn config(&self, layers: Option<usize>) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| SagpError::io(p, e))?),
            None => None,
        };
        let mut overrides = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        push("m", self.m.map(|v| v.to_string()));
        push("branching", self.branching.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("n_iter", self.n_iter.map(|v| v.to_string()));
        push("burn_in", self.burn_in.map(|v| v.to_string()));
        push("thin", self.thin.map(|v| v.to_string()));
        push("layers", layers.map(|v| v.to_string()));
        RunConfig::from_sources(file.as_deref(), &overrides)
    }
}

fn parse_layer_candidates(text: &str) -> Result<Vec<usize>> {
    let bad = || usage(format!("cannot parse layer candidates `{text}`"));
    let out: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

fn parse_study_configs(text: &str) -> Result<Vec<StudyConfig>> {
    text.split(',')
        .map(|item| {
            let bad = || usage(format!("study configuration `{item}` is not of the form m:L"));
            let (m, l) = item.trim().split_once(':').ok_or_else(bad)?;
            Ok(StudyConfig {
                m: m.trim().parse().map_err(|_| bad())?,
                n_layers: l.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SagpError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SagpError::io(path, e))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => write_file(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| SagpError::io("<stdout>", e)),
    }
}

fn prediction_table(pred: &PredictionResult, component_ids: Option<&[usize]>) -> Result<Vec<u8>> {
    let d = pred.locations.dim();
    let mut header = vec!["location".to_string()];
    header.extend((1..=d).map(|k| format!("x{k}")));
    header.extend(["mean", "lower", "upper"].map(String::from));
    if let Some(ids) = component_ids {
        header.extend(ids.iter().map(|id| format!("component_{id}")));
    }
    let rows = (0..pred.len()).map(|i| {
        let mut r = vec![(i + 1).to_string()];
        r.extend(pred.locations.row(i).iter().map(f64::to_string));
        r.extend([pred.mean[i], pred.lower[i], pred.upper[i]].map(|v| v.to_string()));
        if let (Some(_), Some(c)) = (component_ids, &pred.per_component_mean) {
            r.extend(c.column(i).iter().map(f64::to_string));
        }
        r
    });
    let mut buf = Vec::new();
    write_table(&mut buf, &header, rows)?;
    Ok(buf)
}

fn fit(a: &FitArgs) -> Result<()> {
    let cfg = a.model.config(a.layers)?;
    let raw = load_csv(&a.data, true)?;
    let data = Dataset::standardize(&raw)?;
    let model = sagp::FittedModel::fit(&data, &cfg.spec)?;
    save_run(&a.out, &cfg, &raw, &model)?;
    log::info!(
        "fitted {} active components, {} kept draws, saved to {}",
        model.fit.scheme.n_active(),
        model.fit.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (cfg, model) = load_run(&a.run)?;
    let at = load_csv(&a.at, false)?;
    let alpha = a.alpha.unwrap_or(cfg.alpha);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(usage(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let pred = model.predict(&at.x, alpha, a.seed.unwrap_or(cfg.spec.mcmc.seed))?;
    let ids = a.components.then_some(model.fit.samples.component_ids.as_slice());
    emit(a.out.as_deref(), &prediction_table(&pred, ids)?)
}

fn cv(a: &CvArgs) -> Result<()> {
    let cfg = a.model.config(None)?;
    let candidates = parse_layer_candidates(&a.layers)?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let data = Dataset::standardize(&load_csv(&a.data, true)?)?;
    let report = cv_select_layers(&data, &cfg.spec, &candidates, a.folds, a.one_se, a.jobs)?;
    emit(a.out.as_deref(), report.to_table().as_bytes())?;
    eprintln!("selected layers: {}", report.selected);
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let (train, test) = generate(&a.scenario.scenario(a.seed)?)?;
    create_dir(&a.out)?;
    for (name, table) in [("train.csv", &train), ("test.csv", &test)] {
        let mut buf = Vec::new();
        write_raw_csv(&mut buf, table)?;
        write_file(&a.out.join(name), &buf)?;
    }
    Ok(())
}

fn study(a: &StudyArgs) -> Result<()> {
    let cfg = a.model.config(None)?;
    let configs = parse_study_configs(&a.configs)?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let scenario = a.scenario.scenario(cfg.spec.mcmc.seed)?;
    let result = run_study(a.batches, &configs, &scenario, &cfg.spec, cfg.alpha, a.jobs)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("study.csv"), result.to_table().as_bytes())?;
    write_file(&a.out.join("summary.csv"), result.summary_table().as_bytes())?;
    write_file(&a.out.join("failures.csv"), result.failures_table().as_bytes())?;
    print!("{}", result.summary_table());
    if !result.failures.is_empty() {
        log::warn!("{} fits failed; see failures.csv", result.failures.len());
    }
    Ok(())
}

fn metrics(a: &MetricsArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(usage(format!("alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let pred = load_columns(&a.pred, &["mean", "lower", "upper"])?;
    let truth = load_columns(&a.truth, &["y"])?.remove(0);
    if truth.len() != pred[0].len() {
        return Err(SagpError::DimensionMismatch {
            expected: pred[0].len(),
            got: truth.len(),
        });
    }
    let values = [
        mse(&truth, &pred[0])?,
        coverage(&pred[1], &pred[2], &truth)?,
        mean_interval_score(&pred[1], &pred[2], &truth, a.alpha)?,
    ];
    let mut out = String::from("metric,value\n");
    for (m, v) in METRICS.iter().zip(values) {
        out.push_str(&format!("{m},{v}\n"));
    }
    emit(None, out.as_bytes())
}

fn prune_info(a: &PruneArgs) -> Result<()> {
    let cfg = a.model.config(a.layers)?;
    let data = Dataset::standardize(&load_csv(&a.data, true)?)?;
    let spec = &cfg.spec;
    let scheme = spec.scheme(&data.x)?;
    let counts = scheme.counts(&data.x)?;
    let mut text = scheme.to_text(Some(&counts));
    let cost = complexity_estimate(data.dim(), &spec.branching, spec.n_layers, data.n(), spec.m)?;
    text.push_str(&format!(
        "# active={} depth={} sweep_cost_estimate={cost}\n",
        scheme.n_active(),
        scheme.active_depth()
    ));
    emit(None, text.as_bytes())
}

fn kind_label(kind: ErrorKind) -> (&'static str, i32) {
    match kind {
        ErrorKind::Usage => ("usage", EXIT_USAGE),
        ErrorKind::Data => ("data", EXIT_DATA),
        ErrorKind::Numerical => ("numerical", EXIT_NUMERICAL),
    }
}

fn report(kind: &str, message: &str) {
    let line: Vec<&str> = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    eprintln!("sagp: error[{kind}]: {}", line.join(" | "));
}

/// Run the tool on `args` (including the program name) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand {
                    EXIT_USAGE
                } else {
                    EXIT_OK
                };
            }
            let text = e.render().to_string();
            let text = text.split("\n\nUsage").next().unwrap_or(&text);
            report("usage", text.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    let outcome = match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Cv(a) => cv(a),
        Command::Simulate(a) => simulate(a),
        Command::Study(a) => study(a),
        Command::Metrics(a) => metrics(a),
        Command::PruneInfo(a) => prune_info(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (label, code) = kind_label(e.kind());
            report(label, &e.to_string());
            code
        }
    }
}
