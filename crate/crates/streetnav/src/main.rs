//! Thin command-line wrapper over the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use streetnav::harness::{run_experiment, Command, ConfigMap, Invocation};

#[derive(Parser)]
#[command(
    name = "streetnav",
    about = "Panorama-graph navigation and spatial description resolution toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// Key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (takes precedence over the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output path: the world directory for gen-world, the report JSON
    /// file otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
    /// Worker count for asynchronous training.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a synthetic world directory.
    GenWorld(Common),
    /// Train a location-prediction model.
    TrainSdr(Common),
    /// Evaluate a location-prediction model or baseline.
    EvalSdr(Common),
    /// Train a navigation policy.
    TrainNav(Common),
    /// Evaluate a navigation policy or baseline.
    EvalNav(Common),
    /// Run the navigation-then-locate pipeline.
    FullTask(Common),
    /// Compute navigation metrics for a predictions file.
    Metrics(Common),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(Common),
}

fn split(sub: Sub) -> (Command, Common) {
    match sub {
        Sub::GenWorld(c) => (Command::GenWorld, c),
        Sub::TrainSdr(c) => (Command::TrainSdr, c),
        Sub::EvalSdr(c) => (Command::EvalSdr, c),
        Sub::TrainNav(c) => (Command::TrainNav, c),
        Sub::EvalNav(c) => (Command::EvalNav, c),
        Sub::FullTask(c) => (Command::FullTask, c),
        Sub::Metrics(c) => (Command::Metrics, c),
        Sub::Gradcheck(c) => (Command::Gradcheck, c),
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (command, common) = split(cli.command);
    let config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            ConfigMap::parse(&text)?
        }
        None => ConfigMap::empty(),
    };
    let invocation = Invocation {
        command,
        config,
        seed: common.seed,
        deterministic: common.deterministic,
        workers: common.workers,
        out: common.out.clone(),
    };
    let report = run_experiment(&invocation)?;
    let json = report.to_json();
    print!("{json}");
    // gen-world's --out is the world directory; every other command treats
    // it as the report destination.
    if command != Command::GenWorld {
        if let Some(path) = &common.out {
            std::fs::write(path, &json)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
