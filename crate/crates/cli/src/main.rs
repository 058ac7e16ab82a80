//! `kaconv`: train, evaluate, audit and benchmark KA convolution networks.

mod commands;
mod layered;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "kaconv", version, about = "Kolmogorov-Arnold convolution networks on the CPU")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON config merged over the built-in defaults; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset root holding `mnist/` and `cifar-10-batches-bin/`.
    #[arg(long, global = true, value_name = "DIR", default_value = "data")]
    pub data: PathBuf,
    /// Output directory, created if absent.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N", env = "KACONV_THREADS")]
    pub threads: Option<usize>,
    /// Compute in 32-bit floats.
    #[arg(long, global = true)]
    pub f32: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and log one CSV row per epoch.
    Train(commands::TrainArgs),
    /// Test accuracy of a checkpoint or a freshly initialized network.
    Eval(commands::EvalArgs),
    /// Per-layer parameter and MAC counts.
    Summary(commands::SummaryArgs),
    /// Compare every backward pass with central finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Forward latency of KA layers against a plain convolution.
    Bench(commands::BenchArgs),
    /// Short training runs over activation families and replaced layers.
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let g = cli.global;
    let run = || match cli.command {
        Command::Train(a) => commands::train(&g, a),
        Command::Eval(a) => commands::eval(&g, a),
        Command::Summary(a) => commands::summary(&g, a),
        Command::Gradcheck(a) => commands::gradcheck(&g, a),
        Command::Bench(a) => commands::bench(&g, a),
        Command::Ablate(a) => commands::ablate(&g, a),
    };
    let result = match g.threads {
        Some(0) => Err(kaconv::Error::Config("--threads must be at least 1".into())),
        Some(n) => kaconv::parallel::with_threads(n, run),
        None => run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
