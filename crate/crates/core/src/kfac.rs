//! Per-layer Kronecker factors collected along the backward solve.
//!
//! For layer `n` with homogeneous input `z̃ⁿ = [zⁿ; 1]` and backpropagated
//! signals `gⁿᵢ = (∂F/∂hⁿ)ᵀqᵢ`, the curvature block `Σ pᵢpᵢᵀ` is approximated
//! by `Āₙ ⊗ B̄ₙ` with `Āₙ = Σⱼ Aₙ(tⱼ)Δt` and `B̄ₙ = Σⱼ Bₙ(tⱼ)Δt`, where
//! `Aₙ = mean_b z̃z̃ᵀ` and `Bₙ = mean_b Σᵢ gᵢgᵢᵀ`.

use crate::adjoint::{batch_size, check_theta, Workspace};
use crate::curvature::stack_terminal;
use crate::error::{Error, Result};
use crate::loss::TerminalCurvature;
use crate::numerics::DenseMatrix;
use crate::odesolve::{odesolve_with_prefix, SolveReport, SolverConfig};
use crate::vector_field::{Mlp, ParamVec};

/// Uniform time grid running from `t1` down to `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    pub dt: f64,
}

pub fn make_grid(t0: f64, t1: f64, samples: usize) -> Result<TimeGrid> {
    if samples < 2 {
        return Err(Error::BadInterval(format!("grid needs at least 2 samples, got {samples}")));
    }
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::BadInterval(format!("need finite t1 > t0, got [{t0}, {t1}]")));
    }
    let dt = (t1 - t0) / (samples - 1) as f64;
    let mut times: Vec<f64> = (0..samples).map(|j| t1 - j as f64 * dt).collect();
    times[samples - 1] = t0;
    Ok(TimeGrid { times, dt })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactors {
    /// `Āₙ`, square in the layer's input width plus one.
    pub a: Vec<DenseMatrix>,
    /// `B̄ₙ`, square in the layer's output width.
    pub b: Vec<DenseMatrix>,
    pub dt: f64,
    pub grid: Vec<f64>,
}

impl KroneckerFactors {
    pub fn zeros(mlp: &Mlp) -> Self {
        let segs = mlp.segments();
        Self {
            a: segs.iter().map(|s| DenseMatrix::zeros(s.cols, s.cols)).collect(),
            b: segs.iter().map(|s| DenseMatrix::zeros(s.rows, s.rows)).collect(),
            dt: 0.0,
            grid: Vec::new(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.a
            .iter()
            .chain(&self.b)
            .map(|m| m.rows() * m.cols())
            .sum()
    }
}

/// Adds `weight · (Aₙ(t), Bₙ(t))` for the batched state `x` and batched
/// cotangents `qs` into `out`.
pub fn add_point_factors(
    mlp: &Mlp,
    theta: &[f64],
    t: f64,
    x: &[f64],
    qs: &[&[f64]],
    weight: f64,
    out: &mut KroneckerFactors,
) -> Result<()> {
    check_theta(mlp, theta)?;
    let batch = batch_size(mlp, x.len())?;
    if let Some(q) = qs.iter().find(|q| q.len() != x.len()) {
        return Err(Error::dims("cotangent", x.len(), q.len()));
    }
    let mut ws = Workspace::new(mlp);
    point_factors(mlp, theta, t, x, qs, weight / batch as f64, out, &mut ws);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn point_factors(
    mlp: &Mlp,
    theta: &[f64],
    t: f64,
    x: &[f64],
    qs: &[&[f64]],
    w: f64,
    out: &mut KroneckerFactors,
    ws: &mut Workspace,
) {
    let m = mlp.state_dim();
    let mut zt = Vec::new();
    for (b, xb) in x.chunks_exact(m).enumerate() {
        mlp.forward(theta, t, xb, &mut ws.trace);
        for (n, a) in out.a.iter_mut().enumerate() {
            zt.clear();
            zt.extend_from_slice(&ws.trace.z[n]);
            zt.push(1.0);
            a.add_outer(w, &zt, &zt);
        }
        for q in qs {
            mlp.backprop(theta, &ws.trace, &q[b * m..(b + 1) * m], &mut ws.scratch, None);
            for (bn, g) in out.b.iter_mut().zip(&ws.scratch.g) {
                bn.add_outer(w, g, g);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSweep {
    pub factors: KroneckerFactors,
    /// Batch-mean loss gradient from the same backward solve.
    pub grad: ParamVec,
    pub x0: Vec<f64>,
    pub report: SolveReport,
}

/// Runs the backward solve `[x, Qx, q₁…q_R, Qu]` segment by segment over
/// `grid`, adding each grid point's factors with weight `Δt`. The returned
/// `nfe` also counts the one extra field evaluation per grid point.
pub fn accumulate_factors(
    mlp: &Mlp,
    theta: &[f64],
    x1: &[f64],
    curv: &[TerminalCurvature],
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<FactorSweep> {
    check_theta(mlp, theta)?;
    let batch = batch_size(mlp, x1.len())?;
    if curv.len() != batch {
        return Err(Error::dims("terminal curvatures", batch, curv.len()));
    }
    if grid.times.len() < 2 {
        return Err(Error::BadInterval("grid needs at least 2 points".into()));
    }
    let (grad0, ys) = stack_terminal(mlp, curv)?;
    let rank = ys.len();
    let m = mlp.state_dim();
    let n = mlp.num_params();
    let bm = batch * m;
    let vec_part = (2 + rank) * bm;

    let mut state = Vec::with_capacity(vec_part + n);
    state.extend_from_slice(x1);
    state.extend_from_slice(&grad0);
    for y in &ys {
        state.extend_from_slice(y);
    }
    state.resize(vec_part + n, 0.0);

    let mut factors = KroneckerFactors::zeros(mlp);
    factors.dt = grid.dt;
    factors.grid = grid.times.clone();
    let mut ws = Workspace::new(mlp);
    let mut field_ws = Workspace::new(mlp);
    let scale = -1.0 / batch as f64;
    let w = grid.dt / batch as f64;
    let mut report: Option<SolveReport> = None;

    for (j, &t) in grid.times.iter().enumerate() {
        {
            let qs: Vec<&[f64]> = (0..rank).map(|i| &state[(2 + i) * bm..(3 + i) * bm]).collect();
            point_factors(mlp, theta, t, &state[..bm], &qs, w, &mut factors, &mut ws);
        }
        let Some(&t_next) = grid.times.get(j + 1) else {
            break;
        };
        let seg = odesolve_with_prefix(
            &state,
            t,
            t_next,
            |t, y, dy| {
                let (dvec, dpar) = dy.split_at_mut(vec_part);
                dpar.fill(0.0);
                let (dx, dcot) = dvec.split_at_mut(bm);
                for b in 0..batch {
                    let r = b * m..(b + 1) * m;
                    mlp.forward(theta, t, &y[r.clone()], &mut field_ws.trace);
                    dx[r].copy_from_slice(field_ws.trace.output());
                    for c in 0..=rank {
                        let off = (1 + c) * bm + b * m;
                        let out = &mut dcot[c * bm + b * m..c * bm + (b + 1) * m];
                        mlp.backprop(theta, &field_ws.trace, &y[off..off + m], &mut field_ws.scratch, Some(out));
                        for v in out.iter_mut() {
                            *v = -*v;
                        }
                        if c == 0 {
                            mlp.accumulate_param_grad(&field_ws.trace, &field_ws.scratch.g, scale, dpar);
                        }
                    }
                }
            },
            cfg,
            vec_part,
        )?;
        state.copy_from_slice(&seg.terminal_state);
        match report.as_mut() {
            Some(r) => r.absorb(seg),
            None => report = Some(seg),
        }
    }
    let mut report = report.expect("grid has at least one segment");
    report.nfe += grid.times.len();
    report.terminal_state = state.clone();
    Ok(FactorSweep {
        factors,
        grad: mlp.wrap(state[vec_part..].to_vec())?,
        x0: state[..bm].to_vec(),
        report,
    })
}
