use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hwtrack::harness::{Command, ExperimentPlan};

#[derive(Parser)]
#[command(name = "hwtrack", version, about = "Bellman tracking policies for many-server queues")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment plan (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the plan's `out`, then `out/`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the Bellman equation for every n in the plan.
    SolveHjb(Common),
    /// Monte Carlo cost of the tracking policy on the queue.
    Simulate(Common),
    /// Bellman value against diffusion Monte Carlo.
    SdeCheck(Common),
    /// Exact tracking value and preemptive optimum on a truncated chain.
    Oracle(Common),
    /// Optimality-gap sweep over n with CSV and plot output.
    GapStudy(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::SolveHjb(a) => (Command::SolveHjb, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::SdeCheck(a) => (Command::SdeCheck, a),
        Cmd::Oracle(a) => (Command::Oracle, a),
        Cmd::GapStudy(a) => (Command::GapStudy, a),
    };
    let result = ExperimentPlan::from_file(&args.config).and_then(|plan| {
        let seed = args.seed.or(plan.seed).unwrap_or(0);
        let out = args
            .out
            .clone()
            .or_else(|| plan.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        command.run(&plan, seed, &out)
    });
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("hwtrack {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
