//! Shared fixtures for the benchmarks.

use snopt_core::data::make_spirals;
use snopt_core::loss::{CurvatureMode, LossKind, TerminalCurvature, TerminalLoss};
use snopt_core::odesolve::SolverConfig;
use snopt_core::vector_field::{Activation, Mlp, MlpSpec, TimeInput};

pub struct Fixture {
    pub mlp: Mlp,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub curvatures: Vec<TerminalCurvature>,
    pub solver: SolverConfig,
}

/// 2-`width`-`width`-2 tanh field on `batch` spiral points, solved with rk4.
pub fn spirals_fixture(width: usize, batch: usize) -> Fixture {
    let mlp = Mlp::new(MlpSpec::new(&[2, width, width, 2], Activation::Tanh, TimeInput::Concat)).expect("net");
    let theta = mlp.init_params(1).values;
    let data = make_spirals(batch.div_ceil(2), 0.05, 1).expect("data");
    let idx: Vec<usize> = (0..batch).collect();
    let (x0, targets) = data.batch(&idx);
    let solver = SolverConfig::rk4(0.05);
    let x1 = snopt_core::adjoint::forward(&mlp, &theta, &x0, 0.0, 1.0, &solver)
        .expect("forward")
        .terminal_state;
    let loss = TerminalLoss::new(LossKind::SoftmaxCe, None);
    let curvatures = x1
        .chunks(2)
        .zip(&targets)
        .map(|(x, t)| loss.curvature(x, t, 0.0, 1.0, CurvatureMode::GaussNewtonScaled).expect("curvature"))
        .collect();
    Fixture {
        mlp,
        theta,
        x0,
        x1,
        curvatures,
        solver,
    }
}
