use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use netsim::scenario::Scenario;

/// Runs simulation scenarios against the full peer stack.
#[derive(Parser)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs a scenario file and prints its trace digest.
    Run {
        scenario: PathBuf,
        /// Also print message counts and the agreement check.
        #[arg(long)]
        verbose: bool,
    },
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    match args.cmd {
        Cmd::Run { scenario, verbose } => {
            let sc = Scenario::load(&scenario)
                .with_context(|| format!("loading {}", scenario.display()))?;
            let dir = tempfile::tempdir().context("creating scratch directory")?;
            let report = adhoc::sim::run_scenario(&sc, dir.path()).context("running scenario")?;
            println!("{}", report.digest);
            if verbose {
                println!(
                    "sent={} delivered={:?} consistent={}",
                    report.sent, report.delivered, report.consistent
                );
            }
            Ok(())
        }
    }
}
