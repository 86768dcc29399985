//! Metrics CSV. Floats carry 17 significant digits so that a file parses
//! back into bit-identical records; lines starting with `#` are comments.

use std::fmt::Write as _;

use snopt_core::trainer::TrainRecord;

use crate::CliError;

pub const HEADER: &str = "iteration,wall_clock_s,train_loss,train_acc,test_loss,test_acc,nfe_fwd,nfe_bwd,t1";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_records(comments: &[String], records: &[TrainRecord]) -> String {
    let mut out = String::new();
    for c in comments {
        for line in c.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    out.push_str(HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            fmt_f64(r.wall_clock_s),
            fmt_f64(r.train_loss),
            fmt_f64(r.train_acc),
            fmt_f64(r.test_loss),
            fmt_f64(r.test_acc),
            r.nfe_fwd,
            r.nfe_bwd,
            fmt_f64(r.t1),
        );
    }
    out
}

/// Comment lines (without the `#` marker) and records.
pub fn read_records(text: &str) -> Result<(Vec<String>, Vec<TrainRecord>), CliError> {
    let mut comments = Vec::new();
    let mut records = Vec::new();
    let mut seen_header = false;
    for (n, line) in text.lines().enumerate() {
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.strip_prefix(' ').unwrap_or(c).to_string());
            continue;
        }
        if !seen_header {
            if line != HEADER {
                return Err(CliError::Config(format!("line {}: unexpected header {line:?}", n + 1)));
            }
            seen_header = true;
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(CliError::Config(format!("line {}: expected 9 columns, got {}", n + 1, cells.len())));
        }
        let bad = |what: &str| CliError::Config(format!("line {}: bad {what}", n + 1));
        let f = |i: usize| cells[i].parse::<f64>();
        let u = |i: usize| cells[i].parse::<usize>();
        records.push(TrainRecord {
            iteration: u(0).map_err(|_| bad("iteration"))?,
            wall_clock_s: f(1).map_err(|_| bad("wall_clock_s"))?,
            train_loss: f(2).map_err(|_| bad("train_loss"))?,
            train_acc: f(3).map_err(|_| bad("train_acc"))?,
            test_loss: f(4).map_err(|_| bad("test_loss"))?,
            test_acc: f(5).map_err(|_| bad("test_acc"))?,
            nfe_fwd: u(6).map_err(|_| bad("nfe_fwd"))?,
            nfe_bwd: u(7).map_err(|_| bad("nfe_bwd"))?,
            t1: f(8).map_err(|_| bad("t1"))?,
        });
    }
    if !seen_header {
        return Err(CliError::Config("missing CSV header".into()));
    }
    Ok((comments, records))
}
