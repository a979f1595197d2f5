use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depflow_core::flow::load_checkpoint;
use depflow_core::harness::{
    load_table, render_density_svg, resolve_out_dir, run_experiment, DensityGrid, ExperimentConfig,
    RunOptions, OUT_ROOT_ENV,
};
use depflow_core::RngState;

#[derive(Parser)]
#[command(
    name = "depflow",
    version,
    about = "Normalizing flows on dependent data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (dataset, schedule, seed) cell of an experiment config.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `out_dir`, then
        /// `$DEPFLOW_OUT/<config stem>`, then `results/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Subsample every grid to six values.
        #[arg(long)]
        fast: bool,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Clear an output directory that holds a different run.
        #[arg(long)]
        force: bool,
    },
    /// Render the density of a 2-D flow checkpoint as SVG.
    Plot {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        resolution: usize,
        #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
        hi: f64,
        /// Flow samples drawn over the heatmap.
        #[arg(long, default_value_t = 0)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild and print the result table of a run directory.
    Table { dir: PathBuf },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Run {
            config,
            out,
            fast,
            jobs,
            force,
        } => run(&config, out, fast, jobs, force),
        Command::Plot {
            checkpoint,
            out,
            resolution,
            lo,
            hi,
            samples,
            seed,
        } => {
            let flow = load_checkpoint(&checkpoint)?;
            let grid = DensityGrid { resolution, lo, hi };
            let pts = if samples > 0 {
                Some(flow.sample(samples, &mut RngState::new(seed))?)
            } else {
                None
            };
            render_density_svg(&flow, &grid, pts.as_ref(), &out)?;
            println!("{}", out.display());
            Ok(0)
        }
        Command::Table { dir } => {
            let (_, table) = load_table(&dir)?;
            print!("{}", table.markdown());
            Ok(0)
        }
    }
}

fn run(
    config: &Path,
    out: Option<PathBuf>,
    fast: bool,
    jobs: usize,
    force: bool,
) -> anyhow::Result<u8> {
    let cfg = ExperimentConfig::load(config)?;
    let stem = config
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("experiment");
    let env_root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    let dir = resolve_out_dir(&cfg, out.as_deref(), env_root.as_deref(), stem);
    let opts = RunOptions { fast, jobs, force };
    let summary = run_experiment(&cfg, &dir, &opts)?;
    print!("{}", summary.table.markdown());
    println!("results in {}", summary.out_dir.display());
    if summary.failures.is_empty() {
        Ok(0)
    } else {
        for f in &summary.failures {
            eprintln!(
                "failed: {} / {} / seed {}: {}",
                f.dataset,
                f.schedule,
                f.seed,
                f.error.as_deref().unwrap_or("")
            );
        }
        Ok(EXIT_PARTIAL)
    }
}
