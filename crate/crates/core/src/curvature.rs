//! Second-order backward sweeps.
//!
//! With `Fx = ∂F/∂x` and `Fu = ∂F/∂θ`, the cost-to-go derivatives obey
//!
//! ```text
//! −dQx/dt  = FxᵀQx              −dQu/dt  = FuᵀQx
//! −dQxx/dt = FxᵀQxx + QxxFx     −dQxu/dt = QxxFu + FxᵀQxu
//! −dQux/dt = FuᵀQxx + QuxFx     −dQuu/dt = FuᵀQxu + QuxFu
//! ```
//!
//! from `Qx = ∇Φ`, `Qxx = ∇²Φ` and zero parameter blocks at `t1`. When
//! `∇²Φ = Σ yᵢyᵢᵀ`, the matrices stay in the span of the vector pairs
//! `−dqᵢ/dt = Fxᵀqᵢ`, `−dpᵢ/dt = Fuᵀqᵢ` with `qᵢ(t1) = yᵢ`, `pᵢ(t1) = 0`:
//! `Qxx = Σ qᵢqᵢᵀ`, `Qxu = Σ qᵢpᵢᵀ`, `Quu = Σ pᵢpᵢᵀ`.

use crate::adjoint::{batch_size, check_theta, Workspace};
use crate::error::{Error, Result};
use crate::loss::TerminalCurvature;
use crate::numerics::DenseMatrix;
use crate::odesolve::{odesolve_with_prefix, SolveReport, SolverConfig};
use crate::vector_field::{Mlp, ParamVec};

fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn pack_upper(m: &DenseMatrix, out: &mut [f64]) {
    let n = m.rows();
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
}

fn unpack_upper(packed: &[f64], n: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n, n);
    let data = m.as_mut_slice();
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            data[j * n + i] = packed[k];
            data[i * n + j] = packed[k];
            k += 1;
        }
    }
    m
}

fn matrix(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
    DenseMatrix::from_col_major(rows, cols, data.to_vec()).expect("slice length fixed by layout")
}

/// Dense derivative blocks at `t0` for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCurvatureState {
    pub x: Vec<f64>,
    pub qx: Vec<f64>,
    pub qu: Vec<f64>,
    pub qxx: DenseMatrix,
    pub qxu: DenseMatrix,
    pub qux: DenseMatrix,
    pub quu: DenseMatrix,
    pub report: SolveReport,
}

struct DenseLayout {
    m: usize,
    n: usize,
}

impl DenseLayout {
    fn x(&self) -> std::ops::Range<usize> {
        0..self.m
    }
    fn qx(&self) -> std::ops::Range<usize> {
        self.m..2 * self.m
    }
    fn qu(&self) -> std::ops::Range<usize> {
        2 * self.m..2 * self.m + self.n
    }
    fn qxx(&self) -> std::ops::Range<usize> {
        let s = self.qu().end;
        s..s + packed_len(self.m)
    }
    fn qxu(&self) -> std::ops::Range<usize> {
        let s = self.qxx().end;
        s..s + self.m * self.n
    }
    fn qux(&self) -> std::ops::Range<usize> {
        let s = self.qxu().end;
        s..s + self.m * self.n
    }
    fn quu(&self) -> std::ops::Range<usize> {
        let s = self.qux().end;
        s..s + packed_len(self.n)
    }
    fn len(&self) -> usize {
        self.quu().end
    }
}

/// `Fx` (m×m) and `Fu` (m×n) at one point, one VJP per output coordinate.
fn jacobians(mlp: &Mlp, theta: &[f64], t: f64, x: &[f64], ws: &mut Workspace) -> (DenseMatrix, DenseMatrix) {
    let m = mlp.state_dim();
    let n = mlp.num_params();
    mlp.forward(theta, t, x, &mut ws.trace);
    let mut fx = DenseMatrix::zeros(m, m);
    let mut fu = DenseMatrix::zeros(m, n);
    let mut e = vec![0.0; m];
    let mut row = vec![0.0; m];
    let mut prow = vec![0.0; n];
    for i in 0..m {
        e.fill(0.0);
        e[i] = 1.0;
        mlp.backprop(theta, &ws.trace, &e, &mut ws.scratch, Some(&mut row));
        prow.fill(0.0);
        mlp.accumulate_param_grad(&ws.trace, &ws.scratch.g, 1.0, &mut prow);
        let fxd = fx.as_mut_slice();
        for (j, &v) in row.iter().enumerate() {
            fxd[j * m + i] = v;
        }
        let fud = fu.as_mut_slice();
        for (j, &v) in prow.iter().enumerate() {
            fud[j * m + i] = v;
        }
    }
    (fx, fu)
}

/// Integrates all six derivative blocks jointly with `x` from `t1` to `t0`.
/// Single sample only; this is the reference path for small nets.
pub fn dense_sweep(
    mlp: &Mlp,
    theta: &[f64],
    x1: &[f64],
    curv: &TerminalCurvature,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<DenseCurvatureState> {
    check_theta(mlp, theta)?;
    let m = mlp.state_dim();
    let n = mlp.num_params();
    if x1.len() != m {
        return Err(Error::dims("terminal state", m, x1.len()));
    }
    if curv.grad.len() != m {
        return Err(Error::dims("terminal gradient", m, curv.grad.len()));
    }
    let lay = DenseLayout { m, n };
    let mut y0 = vec![0.0; lay.len()];
    y0[lay.x()].copy_from_slice(x1);
    y0[lay.qx()].copy_from_slice(&curv.grad);
    pack_upper(&curv.hessian(), &mut y0[lay.qxx()]);

    let mut ws = Workspace::new(mlp);
    let report = odesolve_with_prefix(
        &y0,
        t1,
        t0,
        |t, y, dy| {
            let (fx, fu) = jacobians(mlp, theta, t, &y[lay.x()], &mut ws);
            dy[lay.x()].copy_from_slice(ws.trace.output());

            let qx = &y[lay.qx()];
            for (d, v) in dy[lay.qx()].iter_mut().zip(fx.tr_matvec(qx)) {
                *d = -v;
            }
            for (d, v) in dy[lay.qu()].iter_mut().zip(fu.tr_matvec(qx)) {
                *d = -v;
            }

            let qxx = unpack_upper(&y[lay.qxx()], m);
            let qxu = matrix(m, n, &y[lay.qxu()]);
            let qux = matrix(n, m, &y[lay.qux()]);
            let fxt = fx.transpose();
            let fut = fu.transpose();

            let mut d_xx = fxt.matmul(&qxx);
            d_xx.add_scaled(1.0, &qxx.matmul(&fx));
            d_xx.scale(-1.0);
            pack_upper(&d_xx, &mut dy[lay.qxx()]);

            let mut d_xu = qxx.matmul(&fu);
            d_xu.add_scaled(1.0, &fxt.matmul(&qxu));
            for (d, v) in dy[lay.qxu()].iter_mut().zip(d_xu.as_slice()) {
                *d = -v;
            }

            let mut d_ux = fut.matmul(&qxx);
            d_ux.add_scaled(1.0, &qux.matmul(&fx));
            for (d, v) in dy[lay.qux()].iter_mut().zip(d_ux.as_slice()) {
                *d = -v;
            }

            let mut d_uu = fut.matmul(&qxu);
            d_uu.add_scaled(1.0, &qux.matmul(&fu));
            d_uu.scale(-1.0);
            pack_upper(&d_uu, &mut dy[lay.quu()]);
        },
        cfg,
        2 * m,
    )?;
    let y = &report.terminal_state;
    Ok(DenseCurvatureState {
        x: y[lay.x()].to_vec(),
        qx: y[lay.qx()].to_vec(),
        qu: y[lay.qu()].to_vec(),
        qxx: unpack_upper(&y[lay.qxx()], m),
        qxu: matrix(m, n, &y[lay.qxu()]),
        qux: matrix(n, m, &y[lay.qux()]),
        quu: unpack_upper(&y[lay.quu()], n),
        report,
    })
}

/// Vector-pair state at `t0`. `x`, `qx` and each `q[i]` are batched
/// (`B·m`); `qu` and each `p[i]` are batch means (`n`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankCurvatureState {
    pub x: Vec<f64>,
    pub qx: Vec<f64>,
    pub qu: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub report: SolveReport,
}

impl LowRankCurvatureState {
    /// `Σ qᵢqᵢᵀ`
    pub fn qxx(&self) -> DenseMatrix {
        sum_outer(&self.q, &self.q)
    }

    /// `Σ qᵢpᵢᵀ`
    pub fn qxu(&self) -> DenseMatrix {
        sum_outer(&self.q, &self.p)
    }

    pub fn rank(&self) -> usize {
        self.q.len()
    }
}

fn sum_outer(us: &[Vec<f64>], vs: &[Vec<f64>]) -> DenseMatrix {
    let rows = us.first().map_or(0, Vec::len);
    let cols = vs.first().map_or(0, Vec::len);
    let mut out = DenseMatrix::zeros(rows, cols);
    for (u, v) in us.iter().zip(vs) {
        out.add_outer(1.0, u, v);
    }
    out
}

/// `Σ pᵢpᵢᵀ`
pub fn assemble_quu(state: &LowRankCurvatureState) -> DenseMatrix {
    sum_outer(&state.p, &state.p)
}

/// Terminal gradient and factors of every sample, flattened sample-major.
/// All samples must share one rank.
pub(crate) fn stack_terminal(
    mlp: &Mlp,
    curv: &[TerminalCurvature],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = mlp.state_dim();
    let rank = curv.first().map_or(0, TerminalCurvature::rank);
    let mut grad = Vec::with_capacity(curv.len() * m);
    let mut ys = vec![Vec::with_capacity(curv.len() * m); rank];
    for c in curv {
        if c.grad.len() != m {
            return Err(Error::dims("terminal gradient", m, c.grad.len()));
        }
        if c.rank() != rank {
            return Err(Error::dims("curvature rank", rank, c.rank()));
        }
        grad.extend_from_slice(&c.grad);
        for (dst, y) in ys.iter_mut().zip(&c.factors) {
            if y.len() != m {
                return Err(Error::dims("curvature factor", m, y.len()));
            }
            dst.extend_from_slice(y);
        }
    }
    Ok((grad, ys))
}

/// Integrates `[x, Qx, q₁…q_R, Qu, p₁…p_R]` from `t1` to `t0`. `curv` holds
/// one terminal curvature per sample of `x1`.
pub fn lowrank_sweep(
    mlp: &Mlp,
    theta: &[f64],
    x1: &[f64],
    curv: &[TerminalCurvature],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<LowRankCurvatureState> {
    check_theta(mlp, theta)?;
    let batch = batch_size(mlp, x1.len())?;
    if curv.len() != batch {
        return Err(Error::dims("terminal curvatures", batch, curv.len()));
    }
    let (grad, ys) = stack_terminal(mlp, curv)?;
    let rank = ys.len();
    if rank == 0 {
        return Err(Error::Config("low-rank sweep needs at least one factor".into()));
    }
    let m = mlp.state_dim();
    let n = mlp.num_params();
    let bm = batch * m;
    let vec_part = (2 + rank) * bm;
    let mut y0 = Vec::with_capacity(vec_part + (1 + rank) * n);
    y0.extend_from_slice(x1);
    y0.extend_from_slice(&grad);
    for y in &ys {
        y0.extend_from_slice(y);
    }
    y0.resize(vec_part + (1 + rank) * n, 0.0);

    let mut ws = Workspace::new(mlp);
    let scale = -1.0 / batch as f64;
    let report = odesolve_with_prefix(
        &y0,
        t1,
        t0,
        |t, y, dy| {
            let (dvec, dpar) = dy.split_at_mut(vec_part);
            dpar.fill(0.0);
            let (dx, dcot) = dvec.split_at_mut(bm);
            for b in 0..batch {
                let r = b * m..(b + 1) * m;
                mlp.forward(theta, t, &y[r.clone()], &mut ws.trace);
                dx[r].copy_from_slice(ws.trace.output());
                // Channel 0 is Qx, channels 1..=R are the qᵢ.
                for c in 0..=rank {
                    let off = (1 + c) * bm + b * m;
                    let cot = &y[off..off + m];
                    let out = &mut dcot[c * bm + b * m..c * bm + (b + 1) * m];
                    mlp.backprop(theta, &ws.trace, cot, &mut ws.scratch, Some(out));
                    for v in out.iter_mut() {
                        *v = -*v;
                    }
                    mlp.accumulate_param_grad(&ws.trace, &ws.scratch.g, scale, &mut dpar[c * n..(c + 1) * n]);
                }
            }
        },
        cfg,
        vec_part,
    )?;
    let y = &report.terminal_state;
    let q = (0..rank).map(|i| y[(2 + i) * bm..(3 + i) * bm].to_vec()).collect();
    let p = (0..rank)
        .map(|i| y[vec_part + (1 + i) * n..vec_part + (2 + i) * n].to_vec())
        .collect();
    Ok(LowRankCurvatureState {
        x: y[..bm].to_vec(),
        qx: y[bm..2 * bm].to_vec(),
        qu: y[vec_part..vec_part + n].to_vec(),
        q,
        p,
        report,
    })
}

/// Adds `γθ` to the gradient and `γI` to `quu` when given.
pub fn apply_weight_decay(
    grad: &mut ParamVec,
    quu: Option<&mut DenseMatrix>,
    gamma: f64,
    theta: &[f64],
) -> Result<()> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("weight decay must be non-negative, got {gamma}")));
    }
    if theta.len() != grad.len() {
        return Err(Error::dims("parameter vector", grad.len(), theta.len()));
    }
    if gamma == 0.0 {
        return Ok(());
    }
    for (g, t) in grad.values.iter_mut().zip(theta) {
        *g += gamma * t;
    }
    if let Some(q) = quu {
        if q.rows() != grad.len() || !q.is_square() {
            return Err(Error::dims("curvature matrix", grad.len(), q.rows()));
        }
        q.add_identity(gamma);
    }
    Ok(())
}
