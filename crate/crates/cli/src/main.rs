use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod data;
mod eval;
mod model;
mod settings;

use settings::{ConfigFile, Usage};

/// RGB/IR drone-vs-bird detection toolkit.
#[derive(Parser, Debug)]
#[command(name = "egd", version, about)]
struct Cli {
    /// TOML file with one section per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: EGD_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply the restoration filter chain to every image in a directory.
    Restore(data::RestoreArgs),
    /// Pair, split, emit manifests, verify and report in one pass.
    Prepare(data::PrepareArgs),
    /// List RGB/IR pairs after sorting and truncation.
    Pair(data::PairArgs),
    /// Stratified split and manifest emission without verification.
    Split(data::SplitArgs),
    /// Check that every manifest entry exists, pairs up and parses.
    Verify(data::VerifyArgs),
    /// Class and size distribution of a prepared dataset.
    Report(data::ReportArgs),
    /// Parameter and MAC accounting, baseline against EGD.
    Analyze(model::AnalyzeArgs),
    /// Run a model over images and write predictions.
    Forward(model::ForwardArgs),
    /// Score a prediction file against manifest labels.
    Evaluate(eval::EvaluateArgs),
    /// Finite-difference check of every operator and block.
    Gradcheck(model::GradcheckArgs),
    /// Batch-1 latency and throughput.
    Bench(model::BenchArgs),
    /// Write a weight file from seeded random initialisation.
    InitWeights(model::InitWeightsArgs),
}

/// Architecture and modality selection shared by model subcommands.
#[derive(Args, Debug, Clone)]
pub struct VariantArgs {
    /// egd or baseline.
    #[arg(long)]
    arch: Option<String>,
    /// rgb, ir or fusion.
    #[arg(long)]
    modality: Option<String>,
}

fn configure_threads(cli: Option<usize>, file: &ConfigFile) -> anyhow::Result<()> {
    let env = match std::env::var("EGD_THREADS") {
        Ok(s) => Some(
            s.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| settings::usage(format!("EGD_THREADS must be a positive integer, got '{s}'")))?,
        ),
        Err(_) => None,
    };
    let n = match cli {
        Some(0) => return Err(settings::usage("--threads must be positive")),
        Some(n) => Some(n),
        None => file.threads()?.or(env),
    };
    if let Some(n) = n {
        // a second initialisation only happens in tests; keep the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    configure_threads(cli.threads, &file)?;
    match cli.command {
        Command::Restore(a) => data::restore(a, &file),
        Command::Prepare(a) => data::prepare(a, &file),
        Command::Pair(a) => data::pair(a, &file),
        Command::Split(a) => data::split(a, &file),
        Command::Verify(a) => data::verify(a, &file),
        Command::Report(a) => data::report(a, &file),
        Command::Analyze(a) => model::analyze(a, &file),
        Command::Forward(a) => model::forward(a, &file),
        Command::Evaluate(a) => eval::evaluate(a, &file),
        Command::Gradcheck(a) => model::gradcheck(a, &file),
        Command::Bench(a) => model::bench(a, &file),
        Command::InitWeights(a) => model::init_weights(a, &file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
