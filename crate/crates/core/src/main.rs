use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use injective_mlmc::harness::{run_experiment, Command, ExperimentConfig};
use injective_mlmc::Error;

#[derive(Parser)]
#[command(version, about = "Monte Carlo and multilevel Monte Carlo moment estimation in injective tensor norms")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Error-vs-sample-size or error-vs-level rate table.
    McRate(Common),
    /// Calibrate, allocate and run multilevel estimation over an ε grid.
    MlmcRun(Common),
    /// Print sample allocations for an ε grid.
    Allocate(Common),
    /// Symmetric injective norm of a tensor given in the config.
    TensorNorm(Common),
    /// Projective vs injective error of the uniform-basis example.
    Counterexample(Common),
    /// Khintchine, symmetrization and contraction checks.
    PropertySuite(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`; defaults to `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::McRate(a) => (Command::McRate, a),
        Cmd::MlmcRun(a) => (Command::MlmcRun, a),
        Cmd::Allocate(a) => (Command::Allocate, a),
        Cmd::TensorNorm(a) => (Command::TensorNorm, a),
        Cmd::Counterexample(a) => (Command::Counterexample, a),
        Cmd::PropertySuite(a) => (Command::PropertySuite, a),
    };
    match run(command, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: some checks failed", command.name());
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("{}: {e}", command.name());
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(command: Command, args: Common) -> Result<bool, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    let out = args
        .out
        .or_else(|| cfg.run.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.run.out = Some(out.display().to_string());
    let manifest = run_experiment(command, &cfg, &out)?;
    println!(
        "{}: wrote {} to {} in {:.2}s",
        command.name(),
        manifest.outputs.join(", "),
        out.display(),
        manifest.wall_time_s
    );
    Ok(manifest.passed)
}
