//! Forward flow and the first-order adjoint backward pass.
//!
//! Batched states are stored sample-major: sample `b` occupies
//! `x[b·m..(b+1)·m]`. The parameter accumulator is averaged over the batch.

use crate::error::{Error, Result};
use crate::odesolve::{odesolve, odesolve_with_prefix, SolveReport, SolverConfig};
use crate::vector_field::{LayerTrace, Mlp, ParamVec, Scratch};

/// Per-evaluation buffers reused across samples and stages.
pub(crate) struct Workspace {
    pub trace: LayerTrace,
    pub scratch: Scratch,
}

impl Workspace {
    pub fn new(mlp: &Mlp) -> Self {
        Self {
            trace: mlp.new_trace(),
            scratch: mlp.new_scratch(),
        }
    }
}

pub(crate) fn batch_size(mlp: &Mlp, len: usize) -> Result<usize> {
    let m = mlp.state_dim();
    if len == 0 || !len.is_multiple_of(m) {
        return Err(Error::dims("batched state", m * (len / m).max(1), len));
    }
    Ok(len / m)
}

pub(crate) fn check_theta(mlp: &Mlp, theta: &[f64]) -> Result<()> {
    if theta.len() != mlp.num_params() {
        return Err(Error::dims("parameter vector", mlp.num_params(), theta.len()));
    }
    Ok(())
}

/// Integrates every sample of `x0` from `t0` to `t1`.
pub fn forward(
    mlp: &Mlp,
    theta: &[f64],
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    check_theta(mlp, theta)?;
    batch_size(mlp, x0.len())?;
    let m = mlp.state_dim();
    let mut ws = Workspace::new(mlp);
    odesolve(
        x0,
        t0,
        t1,
        |t, y, dy| {
            for (xb, db) in y.chunks_exact(m).zip(dy.chunks_exact_mut(m)) {
                mlp.forward(theta, t, xb, &mut ws.trace);
                db.copy_from_slice(ws.trace.output());
            }
        },
        cfg,
    )
}

/// `[x, a, g]` carried by the adjoint solve.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub g: Vec<f64>,
}

impl AdjointState {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.x.len() + self.a.len() + self.g.len());
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.g);
        v
    }

    pub fn unflatten(v: &[f64], state_len: usize, n_params: usize) -> Result<Self> {
        if v.len() != 2 * state_len + n_params {
            return Err(Error::dims("adjoint state", 2 * state_len + n_params, v.len()));
        }
        Ok(Self {
            x: v[..state_len].to_vec(),
            a: v[state_len..2 * state_len].to_vec(),
            g: v[2 * state_len..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    pub grad: ParamVec,
    /// State replayed back to `t0`.
    pub x0: Vec<f64>,
    pub a0: Vec<f64>,
    pub report: SolveReport,
}

/// Solves `dx = F`, `da = −Fxᵀa`, `dg = −mean_b Fθᵀa` from `t1` back to `t0`
/// with `g(t1) = 0`, so `g(t0)` is the batch-mean loss gradient.
pub fn adjoint_gradient(
    mlp: &Mlp,
    theta: &[f64],
    x1: &[f64],
    a1: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<AdjointResult> {
    check_theta(mlp, theta)?;
    let batch = batch_size(mlp, x1.len())?;
    if a1.len() != x1.len() {
        return Err(Error::dims("terminal adjoint", x1.len(), a1.len()));
    }
    let m = mlp.state_dim();
    let bm = batch * m;
    let n = mlp.num_params();
    let init = AdjointState {
        x: x1.to_vec(),
        a: a1.to_vec(),
        g: vec![0.0; n],
    };
    let mut ws = Workspace::new(mlp);
    let scale = -1.0 / batch as f64;
    let report = odesolve_with_prefix(
        &init.flatten(),
        t1,
        t0,
        |t, y, dy| {
            let (dx, rest) = dy.split_at_mut(bm);
            let (da, dg) = rest.split_at_mut(bm);
            dg.fill(0.0);
            for b in 0..batch {
                let r = b * m..(b + 1) * m;
                mlp.forward(theta, t, &y[r.clone()], &mut ws.trace);
                dx[r.clone()].copy_from_slice(ws.trace.output());
                let a = &y[bm + b * m..bm + (b + 1) * m];
                mlp.backprop(theta, &ws.trace, a, &mut ws.scratch, Some(&mut da[r]));
                mlp.accumulate_param_grad(&ws.trace, &ws.scratch.g, scale, dg);
            }
            for v in da.iter_mut() {
                *v = -*v;
            }
        },
        cfg,
        2 * bm,
    )?;
    let end = AdjointState::unflatten(&report.terminal_state, bm, n)?;
    Ok(AdjointResult {
        grad: mlp.wrap(end.g)?,
        x0: end.x,
        a0: end.a,
        report,
    })
}
