mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motlm_core::dataio::Scenario;
use motlm_core::distrib::TaskKind;
use motlm_core::lossmodel::MetricKind;
use motlm_core::predictor::OverlapRule;

#[derive(Parser, Debug)]
#[command(
    name = "motlm",
    version,
    about = "Train and score mixtures of local linear models under a PAC-Bayesian objective"
)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic data set and its ground truth.
    Generate(GenerateArgs),
    /// Fit a model over the lambda grid and keep the best by validation score.
    Train(TrainArgs),
    /// Score fitted models and report bound components.
    Evaluate(EvaluateArgs),
    /// Score a table row by row with locality membership and ambiguity flags.
    Predict(PredictArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Clf,
    Reg,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Clf => TaskKind::Classification,
            TaskArg::Reg => TaskKind::Regression,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    All,
    Train,
    Valid,
    Test,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: motlm_core::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse().map_err(|e: motlm_core::Error| e.to_string())
}

fn parse_overlap(s: &str) -> Result<OverlapRule, String> {
    s.parse().map_err(|e: motlm_core::Error| e.to_string())
}

/// Parsed comma list; a newtype so that clap treats it as one value.
#[derive(Clone, Debug)]
pub struct List<T>(pub Vec<T>);

fn parse_lambda_primes(s: &str) -> Result<List<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad lambda' value '{t}': {e}")))
        .collect::<Result<_, _>>()
        .map(List)
}

/// `a..b` (inclusive) or a comma list.
fn parse_sweep(s: &str) -> Result<List<usize>, String> {
    let bad = |t: &str| format!("bad locality count '{t}'");
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad(a))?;
        let b: usize = b.trim().parse().map_err(|_| bad(b))?;
        (a..=b).collect()
    } else {
        s.split(',').map(|t| t.trim().parse().map_err(|_| bad(t))).collect::<Result<_, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(format!("sweep '{s}' must list positive locality counts"));
    }
    Ok(List(out))
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: Scenario,
    #[arg(long, env = "MOTLM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Row count (default: the scenario's size).
    #[arg(long)]
    pub size: Option<usize>,
    /// Label-flip rate (classification) or label noise std (regression).
    #[arg(long)]
    pub noise: Option<f64>,
    /// CSV destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth JSON destination (default: <out>.truth.json).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the label column.
    #[arg(long, default_value = "y")]
    pub label: String,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Number of localities.
    #[arg(long, required_unless_present = "sweep_n")]
    pub n: Option<usize>,
    /// JSON list of center coordinates (or a ground-truth document) in raw input units.
    #[arg(long, conflicts_with = "unknown_centers", required_unless_present = "unknown_centers")]
    pub centers_file: Option<PathBuf>,
    /// Learn the centers as well.
    #[arg(long)]
    pub unknown_centers: bool,
    /// Comma-separated lambda' grid (default 1.0, 1.25, ..., 5.0).
    #[arg(long, value_parser = parse_lambda_primes)]
    pub lambda_primes: Option<List<f64>>,
    /// Restarts per lambda' (default 10 times n).
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, env = "MOTLM_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, default_value_t = 60)]
    pub qmc_count: usize,
    #[arg(long, value_parser = parse_metric, default_value = "euclidean")]
    pub metric: MetricKind,
    #[arg(long, value_parser = parse_overlap, default_value = "nearest-normalized")]
    pub overlap_rule: OverlapRule,
    /// Sub-Gaussian constant for the full bound (needs --delta).
    #[arg(long, requires = "delta")]
    pub sigma: Option<f64>,
    /// Confidence parameter for the full bound (needs --sigma).
    #[arg(long, requires = "sigma")]
    pub delta: Option<f64>,
    /// Skip Tukey-fence row removal for regression data.
    #[arg(long)]
    pub keep_outliers: bool,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Train once per locality count, e.g. `1..5` or `1,2,4`.
    #[arg(long, value_parser = parse_sweep, conflicts_with = "n")]
    pub sweep_n: Option<List<usize>>,
    /// Model JSON destination (per-n files get a `.n<k>` infix in sweep mode).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-lambda' table destination (default: <out>.lambdas.csv).
    #[arg(long)]
    pub summary_csv: Option<PathBuf>,
    /// Sweep table destination (default: <out>.sweep.csv).
    #[arg(long)]
    pub sweep_csv: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Model JSON; with --reproductions, `{r}` is replaced by 0..R-1.
    #[arg(long)]
    pub model: String,
    /// Data CSV; `{r}` is expanded like --model.
    #[arg(long)]
    pub data: String,
    /// Partition to score, recomputed from the model's seed and split ratios.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Number of model/data pairs to aggregate (mean and standard deviation).
    #[arg(long, default_value_t = 1)]
    pub reproductions: usize,
    #[arg(long, requires = "delta")]
    pub sigma: Option<f64>,
    #[arg(long, requires = "sigma")]
    pub delta: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides the rule stored in the model.
    #[arg(long, value_parser = parse_overlap)]
    pub overlap_rule: Option<OverlapRule>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
