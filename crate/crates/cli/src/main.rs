use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use poolsim::charts::render_charts_from_csv;
use poolsim::experiment::{run_experiment_grid, Experiment, RunOptions};
use poolsim::scenario::{render_surface_svg, surface, write_surface_csv, ScenarioGrid};

#[derive(Parser)]
#[command(name = "poolsim", version, about = "Ride-hailing market simulator with solo and pooled service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Write one events.jsonl per cell.
        #[arg(long)]
        emit_events: bool,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Tabulate and plot the closed-form revenue-rate surface.
    Scenario {
        /// TOML grid; the built-in default grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value = "scenario")]
        out: PathBuf,
    },
    /// Render SVG charts from a metrics.csv.
    Charts {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn simulate(config: PathBuf, emit_events: bool, out: PathBuf, jobs: Option<usize>) -> Result<bool> {
    let mut exp = Experiment::load(&config)?;
    if let Ok(seed) = std::env::var("SIM_SEED") {
        let seed = seed.trim().parse::<u64>().with_context(|| format!("SIM_SEED `{seed}` is not an integer"))?;
        log::info!("SIM_SEED overrides config seeds with {seed}");
        exp.override_seed(seed);
    }
    if jobs == Some(0) {
        anyhow::bail!("--jobs must be at least 1");
    }
    let cells = exp.cells().len();
    log::info!("running {cells} cells into {}", out.display());
    let outcome = run_experiment_grid(&exp, &RunOptions { out_dir: out.clone(), emit_events, jobs })?;
    println!("{} of {} cells succeeded; results in {}", outcome.rows.len(), cells, out.display());
    for f in &outcome.failures {
        eprintln!("failed: {} {} discount {} seed {}: {}", f.profile, f.scenario, f.discount, f.seed, f.error);
    }
    Ok(outcome.all_succeeded())
}

fn scenario(grid: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let grid = match grid {
        Some(path) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            ScenarioGrid::from_toml(&text)?
        }
        None => ScenarioGrid::default(),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("revenue_surface.csv");
    let file = std::fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_surface_csv(&surface(&grid), file)?;
    let svg_path = out.join("revenue_surface.svg");
    std::fs::write(&svg_path, render_surface_svg(&grid)).with_context(|| format!("writing {}", svg_path.display()))?;
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { config, emit_events, out, jobs } => simulate(config, emit_events, out, jobs),
        Command::Scenario { grid, out } => scenario(grid, out).map(|_| true),
        Command::Charts { input, out } => {
            let report = render_charts_from_csv(&input, &out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} charts to {}", report.files.len(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
