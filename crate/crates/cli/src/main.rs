//! `klue` command-line driver.

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod config;
mod curves;
mod rules;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use klue::checks::{gradcheck_suite, CheckTarget};

use config::{Override, Preset};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit status 2.
    Usage(String),
    /// Failure while running; exit status 1.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Parser, Debug)]
#[command(name = "klue", version, about = "Knowledge injection via fuzzy rules for multi-label classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a rule base and print per-class counts.
    Rulegen(RulegenArgs),
    /// Check a rule-base file against the generator invariants.
    ValidateRules {
        #[arg(long)]
        rules: PathBuf,
    },
    /// Train a model; writes checkpoints, a metrics stream and a summary.
    Train(TrainArgs),
    /// Score a checkpoint on the task splits.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_parser = parse_target)]
        target: CheckTarget,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare mAP on the full split and on the baseline's most uncertain samples.
    HardSplit(HardSplitArgs),
    /// Match concept heads to the task's latent concepts.
    ConceptReport(ConceptReportArgs),
    /// Convert metrics streams into a CSV of AUC per epoch and variant.
    ExportCurves(ExportArgs),
}

fn parse_target(s: &str) -> Result<CheckTarget, String> {
    s.parse()
}

#[derive(Args, Debug)]
pub struct RulegenArgs {
    /// Number of concepts.
    #[arg(long = "T", default_value_t = 100)]
    pub concepts: usize,
    /// Number of classes.
    #[arg(long = "K", default_value_t = 20)]
    pub classes: usize,
    /// Positive rules per class.
    #[arg(long = "l", default_value_t = 5)]
    pub rules_per_class: usize,
    #[arg(long, default_value_t = 2)]
    pub qmin: usize,
    #[arg(long, default_value_t = 4)]
    pub qmax: usize,
    /// Fraction of the other classes negated by each positive rule.
    #[arg(long, default_value_t = 1.0)]
    pub pneg: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Let coverage rules also spawn negative rules.
    #[arg(long)]
    pub phase2_negatives: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where the experiment config comes from.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON experiment config; defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    pub preset: Preset,
    /// Override a config entry, e.g. `--set variant=baseline` or
    /// `--set task.label_flip_prob=0.15`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_override)]
    pub sets: Vec<Override>,
    /// Rule-base file; generated from the config when absent.
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also checkpoint every N epochs (0: final checkpoint only).
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Shifted,
}

impl SplitChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Shifted => "shifted",
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Splits to score (default: all three).
    #[arg(long = "split", value_enum)]
    pub splits: Vec<SplitChoice>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct HardSplitArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Baseline checkpoint whose entropy defines the hard subset.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Further checkpoints to score on the same split. Repeatable.
    #[arg(long = "model")]
    pub models: Vec<PathBuf>,
    #[arg(long, default_value_t = 90.0)]
    pub percentile: f64,
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    pub split: SplitChoice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConceptReportArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    pub split: SplitChoice,
    /// Permutations for the null (default: from the config).
    #[arg(long)]
    pub permutations: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Metrics streams written by `train`. Repeatable.
    #[arg(long = "metrics", required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    pub split: SplitChoice,
    #[arg(long, value_enum, default_value_t = curves::Series::Refined)]
    pub series: curves::Series,
}

fn gradcheck(target: CheckTarget, seed: u64) -> CliResult {
    let checks = gradcheck_suite(target, seed)?;
    let mut failed = 0;
    say!("{:<40} {:<16} {:>12}  status", "check", "parameter", "max_rel_err");
    for c in &checks {
        for (p, name) in c.report.params.iter().zip(&c.param_names) {
            let ok = p.max_rel_err <= c.report.tol;
            say!(
                "{:<40} {:<16} {:>12.3e}  {}",
                c.name,
                name,
                p.max_rel_err,
                if ok { "pass" } else { "FAIL" }
            );
        }
        if !c.report.passed {
            failed += 1;
        }
    }
    say!("{target}: {} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} gradient check(s) failed").into());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Rulegen(a) => rules::rulegen(&a),
        Command::ValidateRules { rules } => rules::validate_rules(&rules),
        Command::Train(a) => run::train(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Gradcheck { target, seed } => gradcheck(target, seed),
        Command::HardSplit(a) => run::hard_split(&a),
        Command::ConceptReport(a) => run::concept_report(&a),
        Command::ExportCurves(a) => run::export_curves(&a),
    }
}

fn main() -> ExitCode {
    let filter = std::env::var("KLUE_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new()
        .parse_filters(&filter)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
