use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recon_core::evalrec::PlannerId;
use recon_core::pipeline::{cmd_compare, cmd_run, write_bundled_scenarios, RunError, ScenarioConfig};

/// Reconstruction-aware in-hand viewpoint planning.
///
/// Log verbosity is controlled by RUST_LOG (default: info).
#[derive(Parser)]
#[command(name = "recon", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline with one planner.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        planner: Option<PlannerId>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several planners on shared perception and write comparison.csv.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated planners, e.g. gmm,heuristic180,direct.
        #[arg(long, value_delimiter = ',', default_value = "gmm,heuristic180,direct")]
        planners: Vec<PlannerId>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bundled scenes, arm and configs to a directory.
    Scenarios {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ScenarioConfig, RunError> {
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        // Command-line paths are relative to the working directory, not the config.
        cfg.out_dir = std::path::absolute(&o).unwrap_or(o);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { config, planner, seed, out } => {
            let mut cfg = load(&config, seed, out)?;
            if let Some(p) = planner {
                cfg.planner = p;
            }
            let outcome = cmd_run(&cfg)?;
            println!("{}", recon_core::evalrec::ReconReport::CSV_HEADER);
            println!("{}", outcome.report.csv_row());
            log::info!("artifacts in {}", outcome.out_dir.display());
        }
        Command::Compare { config, planners, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let rows = cmd_compare(&cfg, &planners)?;
            println!("{}", recon_core::pipeline::CompareRow::CSV_HEADER);
            for r in rows {
                println!("{}", r.csv_row());
            }
        }
        Command::Scenarios { out } => {
            for p in write_bundled_scenarios(&out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
