use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eki::cli::{self, presets, RunOptions};
use eki::EkiError;

/// Ensemble Kalman inversion experiments.
#[derive(Debug, Parser)]
#[command(name = "eki", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo spread moments against the collapse bounds.
    Collapse(RunArgs),
    /// Individual spread paths and their late-window decay rates.
    Paths(RunArgs),
    /// Matched runs with and without variance inflation.
    Inflation(RunArgs),
    /// The inflation comparison on the three-observation problem.
    Lowdim(RunArgs),
    /// Print grids of the collapse constants and bounds as CSV.
    BoundsTable {
        /// Write `bounds.csv` here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment definition; the built-in preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Skip SVG charts.
    #[arg(long)]
    no_svg: bool,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            threads: self.threads,
            svg: !self.no_svg,
            seed: self.seed,
        }
    }
}

fn exit_code(err: &EkiError) -> u8 {
    match err {
        EkiError::Io(_) => 4,
        EkiError::NumericalAbort { .. } | EkiError::NonFinite(_) | EkiError::Cholesky(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), EkiError> {
    match cli.command {
        Command::Collapse(args) => {
            let opts = args.options();
            let config = cli::load_config(args.config.as_deref(), presets::COLLAPSE, &opts)?;
            let report = cli::cmd_collapse(&config, &args.out, &opts)?;
            println!("wrote {} files to {}", report.files.len(), args.out.display());
        }
        Command::Paths(args) => {
            let opts = args.options();
            let config = cli::load_config(args.config.as_deref(), presets::PATHS, &opts)?;
            let report = cli::cmd_paths(&config, &args.out, &opts)?;
            for (i, s) in report.slopes.iter().enumerate() {
                println!("path {i}: slope {s:.4} on [{}, {}]", report.window.0, report.window.1);
            }
        }
        Command::Inflation(args) => inflation(&args, presets::INFLATION)?,
        Command::Lowdim(args) => inflation(&args, presets::LOWDIM)?,
        Command::BoundsTable { out } => {
            let table = cli::bounds_table();
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    table.write(&dir.join("bounds.csv"))?;
                }
                None => print!("{}", table.render()),
            }
        }
    }
    Ok(())
}

fn inflation(args: &RunArgs, preset: &str) -> Result<(), EkiError> {
    let opts = args.options();
    let config = cli::load_config(args.config.as_deref(), preset, &opts)?;
    let report = cli::cmd_inflation(&config, &args.out, &opts)?;
    let (base, infl) = report.final_r_obs();
    println!("final mean R_obs: without inflation {base:.6e}, with inflation {infl:.6e}");
    println!(
        "R_obs slope on [{}, {}]: without {:.4}, with {:.4}",
        report.window.0, report.window.1, report.slope_r_obs_baseline, report.slope_r_obs_inflated
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
