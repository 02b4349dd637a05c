//! `neuroscope` — batch pipeline for neuron detection, shared/exclusive
//! classification, ablation scoring, and neuron-targeted training on a
//! self-contained toy transformer.
//!
//! Exit codes: 0 success, 2 config error, 3 precondition failure,
//! 4 undefined metric outcome.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::Overrides;

#[derive(Parser)]
#[command(
    name = "neuroscope",
    version,
    about = "Detect language-related neurons in a toy transformer, classify them, score them by ablation, and train them selectively"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: config out_dir, then "out")
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel stages
    #[arg(long)]
    threads: Option<usize>,
    /// Impact scope: layer | final
    #[arg(long)]
    scope: Option<String>,
    /// Activation criterion: topq:F | sigma:F
    #[arg(long)]
    criterion: Option<String>,
    /// Consistency fraction in (0, 1]
    #[arg(long)]
    tau: Option<f64>,
    /// Exclusivity mode: eq3 | unique
    #[arg(long)]
    mode: Option<String>,
    /// Training strategy: auto | all | shared | exclusive | random:N
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Neuron set file to ablate
    #[arg(long)]
    set: PathBuf,
    /// Language tag (must exist in the config) whose corpus is evaluated
    #[arg(long)]
    language: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory holding the artifacts to merge
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Identify each language's consistently high-impact neurons
    Detect(CommonArgs),
    /// Split previously detected sets into shared and exclusive groups
    Classify(CommonArgs),
    /// Perplexity delta from ablating one serialized neuron set
    Ablate(AblateArgs),
    /// Full pipeline: detect, classify, ablation deltas, importance, score
    Score(CommonArgs),
    /// Neuron-targeted continual training with gradient masking
    Train(CommonArgs),
    /// Merge artifacts in an output directory into one summary
    Report(ReportArgs),
}

fn overrides_of(common: &CommonArgs) -> Overrides {
    Overrides {
        out: common.out.clone(),
        seed: common.seed,
        scope: common.scope.clone(),
        criterion: common.criterion.clone(),
        tau: common.tau,
        mode: common.mode.clone(),
        strategy: common.strategy.clone(),
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn run() -> Result<u8, CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Detect(common) => {
            init_threads(common.threads);
            let resolved = config::resolve(&common.config, &overrides_of(common))?;
            commands::cmd_detect(&resolved)
        }
        Command::Classify(common) => {
            init_threads(common.threads);
            let resolved = config::resolve(&common.config, &overrides_of(common))?;
            commands::cmd_classify(&resolved)
        }
        Command::Ablate(args) => {
            init_threads(args.common.threads);
            let resolved = config::resolve(&args.common.config, &overrides_of(&args.common))?;
            commands::cmd_ablate(&resolved, &args.set, &args.language)
        }
        Command::Score(common) => {
            init_threads(common.threads);
            let resolved = config::resolve(&common.config, &overrides_of(common))?;
            commands::cmd_score(&resolved)
        }
        Command::Train(common) => {
            init_threads(common.threads);
            let resolved = config::resolve(&common.config, &overrides_of(common))?;
            commands::cmd_train(&resolved)
        }
        Command::Report(args) => commands::cmd_report(&args.out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}
