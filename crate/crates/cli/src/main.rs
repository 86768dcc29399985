use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snopt_cli::{cmd_error_study, cmd_grid, cmd_train, cmd_verify, config, grid, CliError};
use snopt_core::adjoint::adjoint_gradient;
use snopt_core::oracle::VerifyOptions;
use snopt_core::trainer::ExperimentConfig;

#[derive(Parser)]
#[command(name = "snopt-kit", version, about = "Train Neural ODEs with a second-order optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write the metrics CSV.
    Train {
        config: PathBuf,
        #[arg(short, long, default_value = "metrics.csv")]
        out: PathBuf,
        /// `section.key=value`, applied after the file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep the cartesian product of a grid file.
    Grid {
        config: PathBuf,
        grid: PathBuf,
        #[arg(short, long, default_value = "grid_out")]
        out_dir: PathBuf,
        /// Parallel runs; defaults to the number of CPUs.
        #[arg(short, long)]
        jobs: Option<usize>,
    },
    /// Run the oracle checks; exit 0 iff all pass.
    Verify {
        /// Multiplies every tolerance.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        tolerance_scale: f64,
    },
    /// Gradient and curvature error per solver setting.
    ErrorStudy {
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the default config as TOML.
    Defaults,
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let mut stdout = std::io::stdout();
    match cli.command {
        Command::Train { config, out, overrides } => {
            let rows = cmd_train(&config, &out, &overrides)?;
            eprintln!("wrote {rows} rows to {}", out.display());
        }
        Command::Grid { config, grid: g, out_dir, jobs } => {
            let workers = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let rows = cmd_grid(&config, &g, &out_dir, workers)?;
            eprintln!("{} cells, summary in {}", rows.len(), out_dir.join("summary.csv").display());
            if let Some(best) = grid::best_cell(&rows) {
                println!("best cell {}: {} (final train loss {})", best.cell, best.values.join(", "), best.final_train_loss);
            }
        }
        Command::Verify { tolerance_scale } => {
            if tolerance_scale.is_nan() || tolerance_scale <= 0.0 {
                return Err(CliError::Config("tolerance scale must be positive".into()));
            }
            let opts = VerifyOptions {
                tolerance_scale,
                gradient: adjoint_gradient,
            };
            if !cmd_verify(&opts, &mut stdout) {
                return Ok(ExitCode::from(snopt_cli::EXIT_NUMERIC));
            }
        }
        Command::ErrorStudy { csv } => cmd_error_study(csv.as_deref(), &mut stdout)?,
        Command::Defaults => print!("{}", config::to_toml(&ExperimentConfig::default())),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // Usage errors are configuration errors; exit 2 is reserved for numerics.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { snopt_cli::EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("snopt-kit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
