//! Library half of the `snopt-kit` binary, so that commands are testable
//! without spawning processes.

pub mod config;
pub mod grid;
pub mod metrics;

use std::io::Write;
use std::path::Path;

use snopt_core::loss::{LossKind, Target, TerminalLoss};
use snopt_core::odesolve::SolverConfig;
use snopt_core::oracle::{self, ErrorStudyRow, VerifyOptions};
use snopt_core::trainer::train;
use snopt_core::vector_field::{Activation, Mlp, MlpSpec, TimeInput};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<snopt_core::Error> for CliError {
    fn from(e: snopt_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Trains once and writes the metrics CSV; returns the number of rows.
pub fn cmd_train(config_path: &Path, out_path: &Path, overrides: &[String]) -> Result<usize, CliError> {
    let cfg = config::load_config(config_path, overrides)?;
    let records = train(cfg.clone())?;
    let mut comments = vec![format!("config {}", config_path.display()), format!("seed {}", cfg.seed)];
    comments.extend(overrides.iter().map(|o| format!("override {o}")));
    write_file(out_path, &metrics::write_records(&comments, &records))?;
    Ok(records.len())
}

/// Runs the sweep and writes `summary.csv` into `out_dir`.
pub fn cmd_grid(
    config_path: &Path,
    grid_path: &Path,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<grid::CellSummary>, CliError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))
    };
    let base: toml::Table = read(config_path)?
        .parse()
        .map_err(|e| CliError::Config(format!("config parse error: {e}")))?;
    let g = grid::Grid::parse(&read(grid_path)?)?;
    let rows = grid::run_grid(&base, &g, out_dir, workers)?;
    write_file(&out_dir.join("summary.csv"), &grid::summary_csv(&g, &rows))?;
    Ok(rows)
}

/// Prints one line per oracle check; true iff all pass.
pub fn cmd_verify(opts: &VerifyOptions, out: &mut dyn Write) -> bool {
    let mut all = true;
    for (check, err) in oracle::verify(opts) {
        let ok = check.passed();
        all &= ok;
        let _ = write!(
            out,
            "[{}] {}: error {:.3e}, tolerance {:.1e}",
            if ok { "PASS" } else { "FAIL" },
            check.name,
            check.error,
            check.tolerance
        );
        let _ = match err {
            Some(e) => writeln!(out, " ({e})"),
            None => writeln!(out),
        };
    }
    all
}

/// Error study on a small fixed net: first- and second-order errors for
/// each solver setting against finite-difference references.
pub fn default_error_study() -> Result<Vec<ErrorStudyRow>, CliError> {
    let mlp = Mlp::new(MlpSpec::new(&[2, 8, 2], Activation::Tanh, TimeInput::Concat))?;
    let theta = mlp.init_params(5).values;
    let loss = TerminalLoss::new(LossKind::SoftmaxCe, None);
    let rows = oracle::error_study(
        &mlp,
        &theta,
        &[0.4, -0.7],
        &loss,
        &Target::Class(0),
        0.0,
        1.0,
        &oracle::default_study_solvers(),
        &SolverConfig::dopri5(1e-12, 1e-12),
    )?;
    Ok(rows)
}

pub fn cmd_error_study(csv_out: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = default_error_study()?;
    let _ = write!(out, "{}", oracle::study_markdown(&rows));
    if let Some(p) = csv_out {
        write_file(p, &oracle::study_csv(&rows))?;
    }
    Ok(())
}
