//! Terminal objectives on `x(t1)` and their derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kron_vec, DenseMatrix};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½‖o − τ‖²`
    Mse,
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMode {
    /// Exact symmetric factorization of the terminal Hessian.
    ExactRank,
    /// Single factor `∇Φ / √(t1 − t0)`.
    #[default]
    GaussNewtonScaled,
}

/// Affine map `o = V x + c`, stored as `vec([V c])` column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub outputs: usize,
    pub inputs: usize,
    pub params: Vec<f64>,
}

impl Readout {
    pub fn new(outputs: usize, inputs: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut params = vec![0.0; outputs * (inputs + 1)];
        for v in &mut params[..outputs * inputs] {
            *v = rng.uniform(-bound, bound);
        }
        Self {
            outputs,
            inputs,
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut o = self.params[self.outputs * self.inputs..].to_vec();
        for (j, &xj) in x.iter().enumerate() {
            let col = &self.params[j * self.outputs..(j + 1) * self.outputs];
            for (oi, &v) in o.iter_mut().zip(col) {
                *oi += v * xj;
            }
        }
        o
    }

    /// `Vᵀ v`
    pub fn pullback(&self, v: &[f64]) -> Vec<f64> {
        (0..self.inputs)
            .map(|j| {
                let col = &self.params[j * self.outputs..(j + 1) * self.outputs];
                col.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCurvature {
    /// `∂Φ/∂x(t1)`
    pub grad: Vec<f64>,
    /// `Φxx ≈ Σ yᵢ yᵢᵀ`
    pub factors: Vec<Vec<f64>>,
    pub mode: CurvatureMode,
}

impl TerminalCurvature {
    pub fn rank(&self) -> usize {
        self.factors.len()
    }

    pub fn hessian(&self) -> DenseMatrix {
        let m = self.grad.len();
        let mut h = DenseMatrix::zeros(m, m);
        for y in &self.factors {
            h.add_outer(1.0, y, y);
        }
        h
    }
}

/// Terminal loss with an optional affine readout in front of it.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalLoss {
    pub kind: LossKind,
    pub readout: Option<Readout>,
}

impl TerminalLoss {
    pub fn new(kind: LossKind, readout: Option<Readout>) -> Self {
        Self { kind, readout }
    }

    fn output(&self, x1: &[f64]) -> Vec<f64> {
        match &self.readout {
            Some(r) => r.apply(x1),
            None => x1.to_vec(),
        }
    }

    fn pullback(&self, v: &[f64]) -> Vec<f64> {
        match &self.readout {
            Some(r) => r.pullback(v),
            None => v.to_vec(),
        }
    }

    fn check(&self, x1: &[f64], target: &Target) -> Result<Vec<f64>> {
        if let Some(r) = &self.readout {
            if x1.len() != r.inputs {
                return Err(Error::dims("readout input", r.inputs, x1.len()));
            }
        }
        let o = self.output(x1);
        match (self.kind, target) {
            (LossKind::SoftmaxCe, Target::Class(c)) if *c < o.len() => Ok(o),
            (LossKind::SoftmaxCe, Target::Class(c)) => Err(Error::BadLabel {
                label: *c,
                classes: o.len(),
            }),
            (LossKind::Mse, Target::Vector(t)) if t.len() == o.len() => Ok(o),
            (LossKind::Mse, Target::Vector(t)) => Err(Error::dims("target", o.len(), t.len())),
            _ => Err(Error::Config("target kind does not match the loss".into())),
        }
    }

    pub fn value(&self, x1: &[f64], target: &Target) -> Result<f64> {
        let o = self.check(x1, target)?;
        Ok(match (self.kind, target) {
            (LossKind::SoftmaxCe, Target::Class(c)) => log_sum_exp(&o) - o[*c],
            (_, Target::Vector(t)) => 0.5 * o.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            _ => unreachable!(),
        })
    }

    /// `∂Φ/∂o` in output (logit) space.
    fn output_grad(&self, o: &[f64], target: &Target) -> Vec<f64> {
        match target {
            Target::Class(c) => {
                let mut p = softmax(o);
                p[*c] -= 1.0;
                p
            }
            Target::Vector(t) => o.iter().zip(t).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn grad(&self, x1: &[f64], target: &Target) -> Result<Vec<f64>> {
        let o = self.check(x1, target)?;
        Ok(self.pullback(&self.output_grad(&o, target)))
    }

    /// Gradient with respect to the readout parameters (empty without a readout).
    pub fn readout_grad(&self, x1: &[f64], target: &Target) -> Result<Vec<f64>> {
        let o = self.check(x1, target)?;
        if self.readout.is_none() {
            return Ok(Vec::new());
        }
        let mut xt = x1.to_vec();
        xt.push(1.0);
        Ok(kron_vec(&xt, &self.output_grad(&o, target)))
    }

    pub fn predict(&self, x1: &[f64]) -> usize {
        argmax(&self.output(x1))
    }

    pub fn curvature(
        &self,
        x1: &[f64],
        target: &Target,
        t0: f64,
        t1: f64,
        mode: CurvatureMode,
    ) -> Result<TerminalCurvature> {
        if !(t1 > t0) {
            return Err(Error::BadInterval(format!("need t1 > t0, got [{t0}, {t1}]")));
        }
        let o = self.check(x1, target)?;
        let grad = self.pullback(&self.output_grad(&o, target));
        let factors = match mode {
            CurvatureMode::GaussNewtonScaled => {
                let s = 1.0 / (t1 - t0).sqrt();
                vec![grad.iter().map(|g| g * s).collect()]
            }
            CurvatureMode::ExactRank => match self.kind {
                LossKind::Mse => (0..o.len())
                    .map(|i| {
                        let mut e = vec![0.0; o.len()];
                        e[i] = 1.0;
                        self.pullback(&e)
                    })
                    .collect(),
                // diag(p) − ppᵀ = Σₖ pₖ (eₖ − p)(eₖ − p)ᵀ
                LossKind::SoftmaxCe => {
                    let p = softmax(&o);
                    (0..p.len())
                        .map(|k| {
                            let sk = p[k].sqrt();
                            let v: Vec<f64> = p
                                .iter()
                                .enumerate()
                                .map(|(i, &pi)| sk * (f64::from(u8::from(i == k)) - pi))
                                .collect();
                            self.pullback(&v)
                        })
                        .collect()
                }
            },
        };
        Ok(TerminalCurvature {
            grad,
            factors,
            mode,
        })
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
