//! Hyper-parameter sweeps: the cartesian product of override lists.
//!
//! ```toml
//! [grid]
//! "optimizer.kind" = ["adam", "sgd"]
//! "optimizer.lr" = [0.01, 0.1]
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use snopt_core::trainer::{train, ExperimentConfig, TrainRecord};
use toml::{Table, Value};

use crate::config::set_path;
use crate::metrics::{fmt_f64, write_records};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<Value>)>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut table: Table = text.parse().map_err(|e| CliError::Config(format!("grid parse error: {e}")))?;
        let grid = match table.remove("grid") {
            None => Table::new(),
            Some(Value::Table(t)) => t,
            Some(_) => return Err(CliError::Config("[grid] must be a table".into())),
        };
        if let Some(k) = table.keys().next() {
            return Err(CliError::Config(format!("unknown top-level key {k:?} in grid file")));
        }
        let axes = grid
            .into_iter()
            .map(|(k, v)| match v {
                Value::Array(vals) => Ok((k, vals)),
                _ => Err(CliError::Config(format!("grid entry {k:?} must be an array"))),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { axes })
    }

    /// Cells in row-major order (last axis fastest). No axes means no cells.
    pub fn cells(&self) -> Vec<Vec<Value>> {
        if self.axes.is_empty() {
            return Vec::new();
        }
        let mut out: Vec<Vec<Value>> = vec![Vec::new()];
        for (_, vals) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    vals.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push(v.clone());
                        c
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: usize,
    pub values: Vec<String>,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_test_loss: f64,
    pub final_test_acc: f64,
    pub wall_clock_s: f64,
    /// `ok` or the error message.
    pub status: String,
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn summarize(cell: usize, values: Vec<String>, result: Result<Vec<TrainRecord>, String>) -> CellSummary {
    let mut s = CellSummary {
        cell,
        values,
        final_train_loss: f64::NAN,
        final_train_acc: f64::NAN,
        final_test_loss: f64::NAN,
        final_test_acc: f64::NAN,
        wall_clock_s: f64::NAN,
        status: "ok".into(),
    };
    match result {
        Ok(records) => {
            if let Some(last) = records.last() {
                s.final_train_loss = last.train_loss;
                s.final_train_acc = last.train_acc;
                s.final_test_loss = last.test_loss;
                s.final_test_acc = last.test_acc;
                s.wall_clock_s = last.wall_clock_s;
            }
        }
        Err(e) => s.status = e.replace(',', ";"),
    }
    s
}

pub fn summary_csv(grid: &Grid, rows: &[CellSummary]) -> String {
    let mut out = String::from("cell");
    for (k, _) in &grid.axes {
        let _ = write!(out, ",{k}");
    }
    out.push_str(",final_train_loss,final_train_acc,final_test_loss,final_test_acc,wall_clock_s,status\n");
    for r in rows {
        let _ = write!(out, "{}", r.cell);
        for v in &r.values {
            let _ = write!(out, ",{}", v.replace(',', ";"));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{}",
            fmt_f64(r.final_train_loss),
            fmt_f64(r.final_train_acc),
            fmt_f64(r.final_test_loss),
            fmt_f64(r.final_test_acc),
            fmt_f64(r.wall_clock_s),
            r.status
        );
    }
    out
}

/// Cell with the lowest finite final training loss.
pub fn best_cell(rows: &[CellSummary]) -> Option<&CellSummary> {
    rows.iter()
        .filter(|r| r.status == "ok" && r.final_train_loss.is_finite())
        .min_by(|a, b| a.final_train_loss.total_cmp(&b.final_train_loss))
}

/// Runs every cell on up to `workers` threads, writing `cell_NNNN.csv` into
/// `out_dir`. Numeric failures are recorded per cell; config errors abort.
pub fn run_grid(
    base: &Table,
    grid: &Grid,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<CellSummary>, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut jobs = Vec::new();
    for (i, cell) in grid.cells().into_iter().enumerate() {
        let mut table = base.clone();
        let mut overrides = Vec::new();
        for ((key, _), v) in grid.axes.iter().zip(&cell) {
            let path: Vec<String> = key.split('.').map(str::to_string).collect();
            set_path(&mut table, &path, v.clone())?;
            overrides.push(format!("override {key}={}", show(v)));
        }
        let mut cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("cell {i}: {}", e.message())))?;
        cfg.apply_seed_env()?;
        cfg.validate()?;
        jobs.push((i, cell.iter().map(show).collect::<Vec<_>>(), overrides, cfg));
    }

    let queue = Mutex::new(jobs.into_iter());
    let results = Mutex::new(Vec::new());
    let io_error = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| loop {
                let Some((i, values, overrides, cfg)) = queue.lock().unwrap().next() else {
                    break;
                };
                let start = Instant::now();
                let result = train(cfg).map_err(|e| e.to_string());
                if let Ok(records) = &result {
                    let mut comments = overrides.clone();
                    comments.push(format!("cell {i}, {:.1}s", start.elapsed().as_secs_f64()));
                    let path = out_dir.join(format!("cell_{i:04}.csv"));
                    if let Err(e) = std::fs::write(&path, write_records(&comments, records)) {
                        *io_error.lock().unwrap() = Some(format!("cannot write {}: {e}", path.display()));
                    }
                }
                results.lock().unwrap().push(summarize(i, values, result));
            });
        }
    });
    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(CliError::Config(e));
    }
    let mut rows = results.into_inner().unwrap();
    rows.sort_by_key(|r| r.cell);
    Ok(rows)
}
