//! Optimizing the integration bound `T` jointly with `θ`.
//!
//! The objective is `Φ(x(T)) + (c/2)T²`. With `s = mean_b ∇Φᵀ F(T, x(T))`,
//! the time-invariant derivative terms are `Q_T = cT + s`, `Q_TT = c + s²`
//! and `Q_Tθ = s·∇θ`. The feedback step is
//! `δT = Q_TT⁻¹ (Q_T + Q_Tθ·δθ)`, applied as `T ← T − η_T δT`.

use serde::{Deserialize, Serialize};

use crate::adjoint::{batch_size, check_theta, Workspace};
use crate::error::{Error, Result};
use crate::numerics::dot;
use crate::vector_field::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonPolicy {
    /// Newton step on `T` with parameter feedback.
    #[default]
    SecondOrder,
    /// `T ← T − η_T Q_T`.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonConfig {
    pub enabled: bool,
    pub policy: HorizonPolicy,
    /// Weight `c` of the `(c/2)T²` penalty.
    pub penalty: f64,
    pub lr: f64,
    /// Iterations between horizon updates.
    pub period: usize,
    /// Exponential moving-average coefficient.
    pub ema: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            policy: HorizonPolicy::SecondOrder,
            penalty: 0.1,
            lr: 0.5,
            period: 75,
            ema: 0.9,
            t_min: 0.05,
            t_max: 2.0,
        }
    }
}

impl HorizonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty >= 0.0 && self.lr >= 0.0) {
            return Err(Error::Config("horizon penalty and lr must be non-negative".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("horizon period must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config("horizon ema must lie in [0, 1)".into()));
        }
        if !(self.t_min > 0.0 && self.t_max >= self.t_min) {
            return Err(Error::Config("need 0 < t_min <= t_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonTerms {
    pub q_t: f64,
    pub q_tt: f64,
    /// `s = mean_b ∇Φᵀ F̄`
    pub s: f64,
    pub q_tu: Vec<f64>,
}

/// Terms at the current bound `t_bar`. `x1` and `phi_grad` are batched;
/// `grad` is the parameter gradient at `t0`.
#[allow(clippy::too_many_arguments)]
pub fn horizon_terms(
    mlp: &Mlp,
    theta: &[f64],
    x1: &[f64],
    phi_grad: &[f64],
    grad: &[f64],
    t_bar: f64,
    penalty: f64,
) -> Result<HorizonTerms> {
    check_theta(mlp, theta)?;
    let batch = batch_size(mlp, x1.len())?;
    if phi_grad.len() != x1.len() {
        return Err(Error::dims("terminal gradient", x1.len(), phi_grad.len()));
    }
    let m = mlp.state_dim();
    let mut ws = Workspace::new(mlp);
    let mut s = 0.0;
    for (xb, gb) in x1.chunks_exact(m).zip(phi_grad.chunks_exact(m)) {
        mlp.forward(theta, t_bar, xb, &mut ws.trace);
        s += dot(gb, ws.trace.output());
    }
    Ok(terms_from_slope(s / batch as f64, grad, t_bar, penalty))
}

pub fn terms_from_slope(s: f64, grad: &[f64], t_bar: f64, penalty: f64) -> HorizonTerms {
    HorizonTerms {
        q_t: penalty * t_bar + s,
        q_tt: penalty + s * s,
        s,
        q_tu: grad.iter().map(|g| s * g).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonState {
    pub cfg: HorizonConfig,
    pub t_bar: f64,
    pub avg_q_t: f64,
    pub avg_q_tt: f64,
    pub avg_s: f64,
    observed: usize,
}

impl HorizonState {
    pub fn new(cfg: HorizonConfig, t_bar: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            t_bar: t_bar.clamp(cfg.t_min, cfg.t_max),
            avg_q_t: 0.0,
            avg_q_tt: 0.0,
            avg_s: 0.0,
            observed: 0,
        })
    }

    /// Folds one iteration's terms into the moving averages; the first
    /// observation initializes them.
    pub fn observe(&mut self, terms: &HorizonTerms) {
        let k = if self.observed == 0 { 0.0 } else { self.cfg.ema };
        self.avg_q_t = k * self.avg_q_t + (1.0 - k) * terms.q_t;
        self.avg_q_tt = k * self.avg_q_tt + (1.0 - k) * terms.q_tt;
        self.avg_s = k * self.avg_s + (1.0 - k) * terms.s;
        self.observed += 1;
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    /// `δT = avg Q_TT⁻¹ (avg Q_T + avg s·⟨grad, δθ⟩)`. A non-positive
    /// `avg Q_TT` (no penalty and a flat loss) suppresses the update.
    pub fn step(&mut self, grad: &[f64], delta_theta: &[f64]) -> Result<f64> {
        let feedback = self.avg_s * dot(grad, delta_theta);
        let values = [self.avg_q_t, self.avg_q_tt, feedback];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate);
        }
        if self.avg_q_tt > 0.0 {
            let delta = (self.avg_q_t + feedback) / self.avg_q_tt;
            self.apply(delta)?;
        }
        Ok(self.t_bar)
    }

    /// `T ← T − η_T · avg Q_T`
    pub fn first_order_step(&mut self) -> Result<f64> {
        if !self.avg_q_t.is_finite() {
            return Err(Error::NonFiniteUpdate);
        }
        self.apply(self.avg_q_t)?;
        Ok(self.t_bar)
    }

    fn apply(&mut self, delta: f64) -> Result<()> {
        let next = self.t_bar - self.cfg.lr * delta;
        if !next.is_finite() {
            return Err(Error::NonFiniteUpdate);
        }
        self.t_bar = next.clamp(self.cfg.t_min, self.cfg.t_max);
        Ok(())
    }

    /// Runs the configured policy.
    pub fn update(&mut self, grad: &[f64], delta_theta: &[f64]) -> Result<f64> {
        match self.cfg.policy {
            HorizonPolicy::SecondOrder => self.step(grad, delta_theta),
            HorizonPolicy::FirstOrder => self.first_order_step(),
        }
    }
}
