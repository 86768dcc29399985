//! Training loop: forward solve, backward sweep, parameter step, optional
//! horizon step, metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_gradient, forward};
use crate::curvature::apply_weight_decay;
use crate::data::{Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::horizon::{horizon_terms, HorizonConfig, HorizonState};
use crate::kfac::{accumulate_factors, make_grid};
use crate::loss::{CurvatureMode, LossKind, Readout, Target, TerminalCurvature, TerminalLoss};
use crate::odesolve::SolverConfig;
use crate::optimizer::{Adam, FirstOrder, Sgd, SnoptHyper, SnoptState, SNOPT_ALPHA};
use crate::rng::SplitMix64;
use crate::vector_field::{Activation, Mlp, MlpSpec, TimeInput};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "SNOPT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Snopt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Tikhonov damping of the eigenbasis update.
    pub epsilon: f64,
    /// Amortization coefficient of the eigenbasis update.
    pub alpha: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Snopt,
            lr: 0.05,
            weight_decay: 0.0,
            epsilon: 0.05,
            alpha: SNOPT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstOrderKind {
    Sgd,
    Adam,
}

/// The readout is always trained by a first-order rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReadoutConfig {
    pub enabled: bool,
    pub optimizer: FirstOrderKind,
    pub lr: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            optimizer: FirstOrderKind::Adam,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_input: TimeInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            time_input: TimeInput::Concat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub curvature: CurvatureMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::SoftmaxCe,
            curvature: CurvatureMode::GaussNewtonScaled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub t0: f64,
    pub t1: f64,
    /// Points of the backward factor grid.
    pub grid_samples: usize,
    /// Test metrics are computed every this many iterations and at the end.
    pub eval_every: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub readout: ReadoutConfig,
    pub solver: SolverConfig,
    pub horizon: HorizonConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 1000,
            batch_size: 128,
            t0: 0.0,
            t1: 1.0,
            grid_samples: 101,
            eval_every: 25,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            readout: ReadoutConfig::default(),
            solver: SolverConfig::default(),
            horizon: HorizonConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > self.t0) {
            return Err(Error::Config(format!("need t1 > t0, got [{}, {}]", self.t0, self.t1)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.grid_samples < 2 {
            return Err(Error::Config("grid_samples must be at least 2".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.optimizer.lr >= 0.0 && self.readout.lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.optimizer.kind == OptimizerKind::Snopt {
            self.snopt_hyper().validate()?;
        }
        self.solver.validate()?;
        if self.horizon.enabled {
            self.horizon.validate()?;
        }
        Ok(())
    }

    fn snopt_hyper(&self) -> SnoptHyper {
        SnoptHyper {
            lr: self.optimizer.lr,
            epsilon: self.optimizer.epsilon,
            alpha: self.optimizer.alpha,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    /// Replaces the seed with `SNOPT_SEED` when that variable is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }
}

/// One row of the metrics log. Test metrics are NaN on rows without an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Cumulative training time, excluding test evaluation.
    pub wall_clock_s: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub nfe_fwd: usize,
    pub nfe_bwd: usize,
    pub t1: f64,
}

enum Rule {
    Snopt(SnoptState),
    First(FirstOrder),
}

fn first_order(kind: FirstOrderKind, lr: f64, len: usize) -> FirstOrder {
    match kind {
        FirstOrderKind::Sgd => FirstOrder::Sgd(Sgd::new(lr, 0.0, len)),
        FirstOrderKind::Adam => FirstOrder::Adam(Adam::new(lr, 0.0, len)),
    }
}

/// Sizes (in f64 elements) of the buffers alive during one backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryProbe {
    /// `x` and the gradient cotangent `Qx`, batched.
    pub state: usize,
    /// The `qᵢ` curvature cotangents, batched.
    pub q_vectors: usize,
    /// Parameter-sized accumulators.
    pub param_accumulators: usize,
    /// Kronecker factor storage.
    pub factors: usize,
    pub total: usize,
}

/// Metrics of one training iteration, before the parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub accuracy: f64,
    pub nfe_fwd: usize,
    pub nfe_bwd: usize,
    pub probe: MemoryProbe,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub mlp: Mlp,
    pub theta: Vec<f64>,
    pub loss: TerminalLoss,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub horizon: Option<HorizonState>,
    rule: Rule,
    readout_rule: Option<FirstOrder>,
    t1: f64,
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
    iteration: usize,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train_set, test_set) = cfg.dataset.build(cfg.seed)?;
        if train_set.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let m = train_set.dim;
        let mut dims = vec![m];
        dims.extend_from_slice(&cfg.model.hidden);
        dims.push(m);
        let mlp = Mlp::new(MlpSpec::new(&dims, cfg.model.activation, cfg.model.time_input))?;
        let theta = mlp.init_params(SplitMix64::derive(cfg.seed, 10)).values;

        let outputs = match (&cfg.loss.kind, train_set.classes, train_set.targets.first()) {
            (LossKind::SoftmaxCe, Some(k), _) => k,
            (LossKind::Mse, None, Some(Target::Vector(v))) => v.len(),
            _ => return Err(Error::Config("loss kind does not fit the dataset".into())),
        };
        let readout = if cfg.readout.enabled {
            Some(Readout::new(outputs, m, SplitMix64::derive(cfg.seed, 11)))
        } else if outputs != m {
            return Err(Error::Config(format!(
                "without a readout the output width {outputs} must equal the state width {m}"
            )));
        } else {
            None
        };
        let readout_rule = readout
            .as_ref()
            .map(|r| first_order(cfg.readout.optimizer, cfg.readout.lr, r.num_params()));
        let loss = TerminalLoss::new(cfg.loss.kind, readout);

        let n = mlp.num_params();
        let rule = match cfg.optimizer.kind {
            OptimizerKind::Snopt => Rule::Snopt(SnoptState::new(cfg.snopt_hyper(), mlp.segments())?),
            OptimizerKind::Sgd => Rule::First(FirstOrder::Sgd(Sgd::new(cfg.optimizer.lr, 0.0, n))),
            OptimizerKind::Adam => Rule::First(FirstOrder::Adam(Adam::new(cfg.optimizer.lr, 0.0, n))),
        };
        let horizon = if cfg.horizon.enabled {
            Some(HorizonState::new(cfg.horizon, cfg.t1)?)
        } else {
            None
        };
        let t1 = horizon.as_ref().map_or(cfg.t1, |h| h.t_bar);
        let order = (0..train_set.len()).collect();
        let rng = SplitMix64::new(SplitMix64::derive(cfg.seed, 12));
        Ok(Self {
            cfg,
            mlp,
            theta,
            loss,
            train_set,
            test_set,
            horizon,
            rule,
            readout_rule,
            t1,
            order,
            cursor: usize::MAX,
            rng,
            iteration: 0,
        })
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Next minibatch; the full set in index order when the batch covers it.
    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.train_set.len();
        let b = self.cfg.batch_size;
        if b >= n {
            return (0..n).collect();
        }
        if self.cursor.saturating_add(b) > n {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }

    /// Mean loss and accuracy of the current model on `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let (x0, targets) = data.batch(&idx);
        let x1 = forward(&self.mlp, &self.theta, &x0, self.cfg.t0, self.t1, &self.cfg.solver)?.terminal_state;
        let (loss, acc) = self.batch_metrics(&x1, &targets)?;
        Ok((loss, acc))
    }

    fn batch_metrics(&self, x1: &[f64], targets: &[Target]) -> Result<(f64, f64)> {
        let m = self.mlp.state_dim();
        let mut total = 0.0;
        let mut correct = 0usize;
        for (x, t) in x1.chunks_exact(m).zip(targets) {
            total += self.loss.value(x, t)?;
            if let Target::Class(c) = t {
                correct += usize::from(self.loss.predict(x) == *c);
            }
        }
        let b = targets.len() as f64;
        let acc = match targets.first() {
            Some(Target::Class(_)) => correct as f64 / b,
            _ => f64::NAN,
        };
        Ok((total / b, acc))
    }

    /// One iteration. Errors are wrapped with the iteration index.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let it = self.iteration;
        let out = self.step_inner().map_err(|e| Error::Training {
            iteration: it,
            source: Box::new(e),
        })?;
        self.iteration += 1;
        Ok(out)
    }

    fn step_inner(&mut self) -> Result<StepOutcome> {
        let idx = self.next_batch();
        let cfg = &self.cfg;
        let (x0, targets) = self.train_set.batch(&idx);
        let (t0, t1) = (cfg.t0, self.t1);
        let fwd = forward(&self.mlp, &self.theta, &x0, t0, t1, &cfg.solver)?;
        let x1 = fwd.terminal_state;
        let (loss_value, accuracy) = self.batch_metrics(&x1, &targets)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteState { t: t1 });
        }

        let m = self.mlp.state_dim();
        let batch = targets.len();
        let mut phi_grad = Vec::with_capacity(x1.len());
        let mut curvatures = Vec::new();
        let mut readout_grad = vec![0.0; self.loss.readout.as_ref().map_or(0, Readout::num_params)];
        let need_curvature = matches!(self.rule, Rule::Snopt(_));
        for (x, t) in x1.chunks_exact(m).zip(&targets) {
            if need_curvature {
                let c = self.loss.curvature(x, t, t0, t1, cfg.loss.curvature)?;
                phi_grad.extend_from_slice(&c.grad);
                curvatures.push(c);
            } else {
                phi_grad.extend(self.loss.grad(x, t)?);
            }
            for (acc, g) in readout_grad.iter_mut().zip(self.loss.readout_grad(x, t)?) {
                *acc += g / batch as f64;
            }
        }

        let (mut grad, nfe_bwd, probe, factors) = if need_curvature {
            let grid = make_grid(t0, t1, cfg.grid_samples)?;
            let sweep = accumulate_factors(&self.mlp, &self.theta, &x1, &curvatures, &grid, &cfg.solver)?;
            let rank = curvatures.first().map_or(0, TerminalCurvature::rank);
            let probe = probe_from(sweep.report.state_len, batch * m, rank, sweep.factors.num_elements());
            (sweep.grad, sweep.report.nfe, probe, Some(sweep.factors))
        } else {
            let adj = adjoint_gradient(&self.mlp, &self.theta, &x1, &phi_grad, t0, t1, &cfg.solver)?;
            let probe = probe_from(adj.report.state_len, batch * m, 0, 0);
            (adj.grad, adj.report.nfe, probe, None)
        };
        apply_weight_decay(&mut grad, None, cfg.optimizer.weight_decay, &self.theta)?;

        let theta_before = self.theta.clone();
        match (&mut self.rule, &factors) {
            (Rule::Snopt(state), Some(f)) => {
                state.step(f, &grad.values, self.mlp.segments(), &mut self.theta)?;
            }
            (Rule::First(opt), _) => {
                opt.step(&grad.values, &mut self.theta);
            }
            (Rule::Snopt(_), None) => unreachable!("curvature sweep runs for the eigenbasis rule"),
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate);
        }
        if let (Some(rule), Some(readout)) = (self.readout_rule.as_mut(), self.loss.readout.as_mut()) {
            rule.step(&readout_grad, &mut readout.params);
        }

        if let Some(h) = self.horizon.as_mut() {
            let terms = horizon_terms(&self.mlp, &theta_before, &x1, &phi_grad, &grad.values, t1, h.cfg.penalty)?;
            h.observe(&terms);
            if (self.iteration + 1).is_multiple_of(h.cfg.period) {
                // Feedback uses the update actually applied to θ.
                let applied: Vec<f64> = self.theta.iter().zip(&theta_before).map(|(a, b)| a - b).collect();
                self.t1 = h.update(&grad.values, &applied)?;
            }
        }

        Ok(StepOutcome {
            loss: loss_value,
            accuracy,
            nfe_fwd: fwd.nfe,
            nfe_bwd,
            probe,
        })
    }

    /// Runs the configured number of iterations.
    pub fn run(&mut self) -> Result<Vec<TrainRecord>> {
        let mut records = Vec::with_capacity(self.cfg.iterations);
        let mut elapsed = 0.0;
        for k in 0..self.cfg.iterations {
            let eval = k % self.cfg.eval_every == 0 || k + 1 == self.cfg.iterations;
            let (test_loss, test_acc) = if eval {
                self.evaluate(&self.test_set).map_err(|e| Error::Training {
                    iteration: self.iteration,
                    source: Box::new(e),
                })?
            } else {
                (f64::NAN, f64::NAN)
            };
            let t1 = self.t1;
            let start = Instant::now();
            let out = self.step()?;
            elapsed += start.elapsed().as_secs_f64();
            records.push(TrainRecord {
                iteration: k,
                wall_clock_s: elapsed,
                train_loss: out.loss,
                train_acc: out.accuracy,
                test_loss,
                test_acc,
                nfe_fwd: out.nfe_fwd,
                nfe_bwd: out.nfe_bwd,
                t1,
            });
        }
        Ok(records)
    }
}

fn probe_from(state_len: usize, batched: usize, rank: usize, factors: usize) -> MemoryProbe {
    let q_vectors = rank * batched;
    let state = 2 * batched;
    let param_accumulators = state_len - state - q_vectors;
    MemoryProbe {
        state,
        q_vectors,
        param_accumulators,
        factors,
        total: state_len + factors,
    }
}

pub fn train(cfg: ExperimentConfig) -> Result<Vec<TrainRecord>> {
    Trainer::new(cfg)?.run()
}

/// Buffer sizes of the first iteration's backward pass.
pub fn memory_probe(cfg: ExperimentConfig) -> Result<MemoryProbe> {
    let mut t = Trainer::new(cfg)?;
    Ok(t.step()?.probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetKind;

    fn small(kind: OptimizerKind, lr: f64) -> ExperimentConfig {
        ExperimentConfig {
            iterations: 20,
            batch_size: 16,
            grid_samples: 11,
            eval_every: 5,
            dataset: DatasetConfig {
                n_per_class: 20,
                ..DatasetConfig::default()
            },
            model: ModelConfig {
                hidden: vec![8],
                ..ModelConfig::default()
            },
            optimizer: OptimizerConfig {
                kind,
                lr,
                ..OptimizerConfig::default()
            },
            solver: SolverConfig::rk4(0.1),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_iterations() {
        let mut t = Trainer::new(ExperimentConfig {
            iterations: 0,
            ..small(OptimizerKind::Snopt, 0.1)
        })
        .unwrap();
        let before = t.theta.clone();
        assert!(t.run().unwrap().is_empty());
        assert_eq!(t.theta, before);
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        for kind in [OptimizerKind::Snopt, OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut cfg = small(kind, 0.0);
            cfg.readout.lr = 0.0;
            cfg.batch_size = 1000;
            let recs = train(cfg).unwrap();
            assert!(recs.iter().all(|r| r.train_loss == recs[0].train_loss), "{kind:?}");
        }
    }

    #[test]
    fn runs_are_deterministic_and_learn() {
        for kind in [OptimizerKind::Snopt, OptimizerKind::Adam, OptimizerKind::Sgd] {
            let lr = if kind == OptimizerKind::Adam { 0.01 } else { 0.05 };
            let a = train(small(kind, lr)).unwrap();
            let b = train(small(kind, lr)).unwrap();
            let la: Vec<f64> = a.iter().map(|r| r.train_loss).collect();
            let lb: Vec<f64> = b.iter().map(|r| r.train_loss).collect();
            assert_eq!(la, lb);
            assert_eq!(a.len(), 20);
            assert!(a.windows(2).all(|w| w[1].wall_clock_s >= w[0].wall_clock_s));
            assert!(a[0].test_loss.is_finite() && a[1].test_loss.is_nan() && a[19].test_loss.is_finite());
            assert_eq!(a[0].nfe_fwd, 40);
        }
    }

    #[test]
    fn regression_runs() {
        let mut cfg = small(OptimizerKind::Snopt, 0.05);
        cfg.dataset.kind = DatasetKind::Regression;
        cfg.dataset.n_per_class = 40;
        cfg.loss.kind = LossKind::Mse;
        cfg.loss.curvature = CurvatureMode::ExactRank;
        cfg.readout.enabled = false;
        let recs = train(cfg).unwrap();
        assert!(recs[0].train_acc.is_nan());
        assert!(recs.last().unwrap().train_loss < recs[0].train_loss);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small(OptimizerKind::Adam, 0.01);
        cfg.t1 = 0.0;
        assert!(matches!(Trainer::new(cfg), Err(Error::Config(_))));
        let mut cfg = small(OptimizerKind::Adam, 0.01);
        cfg.loss.kind = LossKind::Mse;
        assert!(Trainer::new(cfg).is_err());
        let mut cfg = small(OptimizerKind::Snopt, 0.01);
        cfg.optimizer.epsilon = 0.0;
        assert!(Trainer::new(cfg).is_err());
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut cfg = small(OptimizerKind::Sgd, 1e6);
        cfg.solver = SolverConfig::dopri5(1e-3, 1e-3);
        cfg.solver.max_steps = 50;
        let err = train(cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "{err}");
        assert!(err.is_numeric());
    }

    #[test]
    fn probe_is_independent_of_tolerance() {
        let mut probes = Vec::new();
        for tol in [1e-3, 1e-6] {
            for kind in [OptimizerKind::Adam, OptimizerKind::Snopt] {
                let mut cfg = small(kind, 0.01);
                cfg.solver = SolverConfig::dopri5(tol, tol);
                probes.push(memory_probe(cfg).unwrap());
            }
        }
        assert_eq!(probes[0], probes[2]);
        assert_eq!(probes[1], probes[3]);
        assert!(probes[0].total < probes[1].total);
        let n = Trainer::new(small(OptimizerKind::Adam, 0.01)).unwrap().mlp.num_params();
        assert_eq!(probes[0].param_accumulators, n);
        assert_eq!(probes[1].q_vectors, 16 * 2);
    }

    #[test]
    fn seed_env_override() {
        let mut cfg = ExperimentConfig::default();
        std::env::set_var(SEED_ENV, "42");
        cfg.apply_seed_env().unwrap();
        std::env::remove_var(SEED_ENV);
        assert_eq!(cfg.seed, 42);
    }
}
