mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Fractional flocking experiments: agents, Euler solves, comparisons and
/// inference of the fractional order.
#[derive(Debug, Parser)]
#[command(name = "fracflock", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ScenarioArgs {
    /// JSON scenario file with a "preset" field and optional overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset name (example1 or example2); used when no config is given.
    #[arg(long)]
    pub preset: Option<String>,
    /// Fractional order, overriding the config.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// RNG seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the agent model and write trajectory snapshots.
    SimulateAgents(ScenarioArgs),
    /// Solve the fractional Euler system and write field snapshots.
    SolveEuler(ScenarioArgs),
    /// Compare an agent (or Euler) run against an Euler run.
    Compare {
        agent_dir: PathBuf,
        euler_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cells merged per axis into one comparison bin.
        #[arg(long)]
        coarsening: Option<usize>,
    },
    /// Learn the fractional order from agent data.
    Learn {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Validate the configuration and exit.
        #[arg(long)]
        dry_run: bool,
        /// Continue from a saved surrogate model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Use Euler velocities at the hidden order as reference data.
        #[arg(long, conflicts_with = "reference")]
        euler_reference: bool,
        /// Use an existing simulate-agents output directory as reference data.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::SimulateAgents(a) => commands::simulate_agents(&a),
        Command::SolveEuler(a) => commands::solve_euler(&a),
        Command::Compare {
            agent_dir,
            euler_dir,
            out,
            coarsening,
        } => commands::compare(&agent_dir, &euler_dir, &out, coarsening),
        Command::Learn {
            scenario,
            dry_run,
            resume,
            euler_reference,
            reference,
        } => {
            let source = match (euler_reference, reference) {
                (true, _) => commands::ReferenceSource::Euler,
                (false, Some(dir)) => commands::ReferenceSource::Dir(dir),
                (false, None) => commands::ReferenceSource::Agents,
            };
            commands::learn(&scenario, dry_run, resume.as_deref(), &source)
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
