//! Cross-module consistency through the public API.

use proptest::prelude::*;
use snopt_core::adjoint::{adjoint_gradient, forward};
use snopt_core::curvature::{assemble_quu, dense_sweep, lowrank_sweep};
use snopt_core::data::{make_spirals, DatasetConfig};
use snopt_core::kfac::{accumulate_factors, make_grid, KroneckerFactors};
use snopt_core::loss::{CurvatureMode, LossKind, TerminalLoss};
use snopt_core::numerics::{dot, rel_l2, sym_eigen, DenseMatrix};
use snopt_core::odesolve::SolverConfig;
use snopt_core::optimizer::{SnoptHyper, SnoptState};
use snopt_core::trainer::{memory_probe, train, ExperimentConfig, OptimizerConfig, OptimizerKind};
use snopt_core::vector_field::{Activation, LayerSegment, Mlp, MlpSpec, TimeInput};

fn net(dims: &[usize]) -> Mlp {
    Mlp::new(MlpSpec::new(dims, Activation::Tanh, TimeInput::Concat)).unwrap()
}

#[test]
fn every_backward_path_returns_the_adjoint_gradient() {
    let mlp = net(&[2, 5, 2]);
    let theta = mlp.init_params(4).values;
    let cfg = SolverConfig::dopri5(1e-10, 1e-10);
    let loss = TerminalLoss::new(LossKind::SoftmaxCe, None);
    let data = make_spirals(2, 0.05, 4).unwrap();
    let (x0, targets) = data.batch(&[0, 3]);
    let x1 = forward(&mlp, &theta, &x0, 0.0, 1.0, &cfg).unwrap().terminal_state;
    let curv: Vec<_> = x1
        .chunks(2)
        .zip(&targets)
        .map(|(x, t)| loss.curvature(x, t, 0.0, 1.0, CurvatureMode::ExactRank).unwrap())
        .collect();
    let a1: Vec<f64> = curv.iter().flat_map(|c| c.grad.clone()).collect();
    let adj = adjoint_gradient(&mlp, &theta, &x1, &a1, 0.0, 1.0, &cfg).unwrap();

    let low = lowrank_sweep(&mlp, &theta, &x1, &curv, 0.0, 1.0, &cfg).unwrap();
    assert!(rel_l2(&low.qu, &adj.grad.values) < 1e-8);
    assert!(rel_l2(&low.qx, &adj.a0) < 1e-8);
    assert!(rel_l2(&low.x, &x0) < 1e-8);

    let grid = make_grid(0.0, 1.0, 5).unwrap();
    let sweep = accumulate_factors(&mlp, &theta, &x1, &curv, &grid, &cfg).unwrap();
    assert!(rel_l2(&sweep.grad.values, &adj.grad.values) < 1e-8);

    // Single sample: the dense path agrees too.
    let dense = dense_sweep(&mlp, &theta, &x1[..2], &curv[0], 0.0, 1.0, &cfg).unwrap();
    let single = adjoint_gradient(&mlp, &theta, &x1[..2], &curv[0].grad, 0.0, 1.0, &cfg).unwrap();
    assert!(rel_l2(&dense.qu, &single.grad.values) < 1e-8);
    assert!(rel_l2(&dense.qx, &single.a0) < 1e-8);
}

#[test]
fn rank_one_sweep_aliases_the_adjoint() {
    let mlp = net(&[2, 4, 2]);
    let theta = mlp.init_params(8).values;
    let cfg = SolverConfig::dopri5(1e-10, 1e-10);
    let x1 = [0.3, -0.2];
    let a1 = vec![0.7, 0.1];
    let curv = snopt_core::loss::TerminalCurvature {
        grad: a1.clone(),
        factors: vec![a1.clone()],
        mode: CurvatureMode::ExactRank,
    };
    let low = lowrank_sweep(&mlp, &theta, &x1, &[curv], 0.0, 1.0, &cfg).unwrap();
    assert!(rel_l2(&low.q[0], &low.qx) < 1e-12);
    assert!(rel_l2(&low.p[0], &low.qu) < 1e-12);
    let quu = assemble_quu(&low);
    assert!(sym_eigen(&quu).unwrap().values.iter().all(|v| *v >= -1e-10));
}

#[test]
fn snopt_probe_exceeds_adjoint_probe() {
    let base = ExperimentConfig {
        iterations: 1,
        batch_size: 8,
        dataset: DatasetConfig {
            n_per_class: 10,
            ..DatasetConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let snopt = memory_probe(base.clone()).unwrap();
    let adam = memory_probe(ExperimentConfig {
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        ..base
    })
    .unwrap();
    assert!(adam.total < snopt.total);
    assert_eq!(adam.state, snopt.state);
    assert_eq!(adam.q_vectors, 0);
    assert_eq!(adam.factors, 0);
    assert!(snopt.factors > 0);
}

#[test]
fn wall_clock_is_monotone_and_t1_fixed() {
    let cfg = ExperimentConfig {
        iterations: 6,
        batch_size: 8,
        grid_samples: 3,
        dataset: DatasetConfig {
            n_per_class: 8,
            ..DatasetConfig::default()
        },
        solver: SolverConfig::rk4(0.25),
        ..ExperimentConfig::default()
    };
    let records = train(cfg).unwrap();
    assert_eq!(records.len(), 6);
    for w in records.windows(2) {
        assert!(w[1].wall_clock_s >= w[0].wall_clock_s);
        assert_eq!(w[1].iteration, w[0].iteration + 1);
    }
    assert!(records.iter().all(|r| r.t1 == 1.0 && r.nfe_fwd == 16));
}

fn identity_factors(rows: usize, cols: usize) -> KroneckerFactors {
    KroneckerFactors {
        a: vec![DenseMatrix::identity(cols)],
        b: vec![DenseMatrix::identity(rows)],
        dt: 1.0,
        grid: vec![],
    }
}

proptest! {
    #[test]
    fn eigenbasis_step_is_a_descent_direction(
        seed in 0u64..1000,
        eps in 0.01f64..1.0,
        grad in proptest::collection::vec(-3.0f64..3.0, 12),
    ) {
        prop_assume!(grad.iter().any(|g| g.abs() > 1e-6));
        let mut rng = snopt_core::rng::SplitMix64::new(seed);
        let spd = |rng: &mut snopt_core::rng::SplitMix64, n: usize| {
            let g = DenseMatrix::from_col_major(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
            let mut s = g.matmul(&g.transpose());
            s.add_identity(0.1);
            s
        };
        let factors = KroneckerFactors { a: vec![spd(&mut rng, 4)], b: vec![spd(&mut rng, 3)], dt: 1.0, grid: vec![] };
        let segs = [LayerSegment { offset: 0, rows: 3, cols: 4 }];
        let mut hyper = SnoptHyper::new(1.0, eps);
        hyper.alpha = 0.0;
        let mut state = SnoptState::new(hyper, &segs).unwrap();
        let d = state.direction(&factors, &grad, &segs).unwrap();
        prop_assert!(dot(&d, &grad) > 0.0);
    }

    #[test]
    fn identity_factors_normalize_elementwise(
        beta in 0.1f64..10.0,
        eps in 0.01f64..1.0,
        grad in proptest::collection::vec(-2.0f64..2.0, 6),
    ) {
        let segs = [LayerSegment { offset: 0, rows: 2, cols: 3 }];
        let mut hyper = SnoptHyper::new(1.0, eps);
        hyper.alpha = 0.0;
        let mut state = SnoptState::new(hyper, &segs).unwrap();
        let scaled: Vec<f64> = grad.iter().map(|g| beta * g).collect();
        let d = state.direction(&identity_factors(2, 3), &scaled, &segs).unwrap();
        for (di, g) in d.iter().zip(&grad) {
            let want = beta * g / (beta * beta * g * g + eps);
            prop_assert!((di - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}
