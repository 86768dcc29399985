//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kfac::KroneckerFactors;
use crate::numerics::{sym_eigen, DenseMatrix, SymEigen};
use crate::vector_field::LayerSegment;

pub const SNOPT_ALPHA: f64 = 0.75;
pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning-rate grid searched for Adam.
pub const ADAM_LR_GRID: [f64; 11] = [1e-4, 3e-4, 5e-4, 7e-4, 1e-3, 3e-3, 5e-3, 7e-3, 1e-2, 3e-2, 5e-2];
/// Learning-rate grid searched for SGD and SNOpt.
pub const SGD_LR_GRID: [f64; 11] = [1e-3, 3e-3, 5e-3, 7e-3, 1e-2, 3e-2, 5e-2, 7e-2, 1e-1, 3e-1, 5e-1];
pub const WEIGHT_DECAY_GRID: [f64; 3] = [0.0, 1e-4, 1e-3];
pub const SNOPT_EPSILON_GRID: [f64; 3] = [0.1, 0.05, 0.03];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnoptHyper {
    pub lr: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_epsilon() -> f64 {
    0.05
}

fn default_alpha() -> f64 {
    SNOPT_ALPHA
}

impl SnoptHyper {
    pub fn new(lr: f64, epsilon: f64) -> Self {
        Self {
            lr,
            epsilon,
            alpha: SNOPT_ALPHA,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Eigenbases of one layer's factors from the latest step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBasis {
    pub a: SymEigen,
    pub b: SymEigen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnoptState {
    pub hyper: SnoptHyper,
    /// Amortized squared gradient in each layer's eigenbasis (rows × cols).
    pub amortized: Vec<DenseMatrix>,
    pub bases: Vec<LayerBasis>,
}

impl SnoptState {
    pub fn new(hyper: SnoptHyper, segments: &[LayerSegment]) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            amortized: segments.iter().map(|s| DenseMatrix::zeros(s.rows, s.cols)).collect(),
            bases: Vec::new(),
        })
    }

    /// Preconditioned direction `δθ`; updates the amortized squares.
    ///
    /// Per layer: `X = U_Bᵀ G U_A`, `S ← αS + (1−α)X∘X`, `X ← X / (S + ε)`,
    /// `δθ = vec(U_B X U_Aᵀ)`.
    pub fn direction(
        &mut self,
        factors: &KroneckerFactors,
        grad: &[f64],
        segments: &[LayerSegment],
    ) -> Result<Vec<f64>> {
        if factors.a.len() != segments.len() || self.amortized.len() != segments.len() {
            return Err(Error::dims("layer count", segments.len(), factors.a.len()));
        }
        let total = segments.last().map_or(0, |s| s.offset + s.len());
        if grad.len() != total {
            return Err(Error::dims("gradient", total, grad.len()));
        }
        let (alpha, eps) = (self.hyper.alpha, self.hyper.epsilon);
        let mut out = vec![0.0; total];
        self.bases.clear();
        for (n, seg) in segments.iter().enumerate() {
            let (a, b) = (&factors.a[n], &factors.b[n]);
            if a.rows() != seg.cols || b.rows() != seg.rows {
                return Err(Error::dims("Kronecker factor", seg.cols, a.rows()));
            }
            let ea = sym_eigen(a)?;
            let eb = sym_eigen(b)?;
            let g = DenseMatrix::from_col_major(seg.rows, seg.cols, grad[seg.range()].to_vec())?;
            let mut x = eb.vectors.transpose().matmul(&g).matmul(&ea.vectors);
            let s = &mut self.amortized[n];
            for (sv, xv) in s.as_mut_slice().iter_mut().zip(x.as_mut_slice()) {
                *sv = alpha * *sv + (1.0 - alpha) * *xv * *xv;
                *xv /= *sv + eps;
            }
            let d = eb.vectors.matmul(&x).matmul(&ea.vectors.transpose());
            out[seg.range()].copy_from_slice(d.as_slice());
            self.bases.push(LayerBasis { a: ea, b: eb });
        }
        Ok(out)
    }

    /// `θ ← θ − η·δθ`; returns `δθ`.
    pub fn step(
        &mut self,
        factors: &KroneckerFactors,
        grad: &[f64],
        segments: &[LayerSegment],
        theta: &mut [f64],
    ) -> Result<Vec<f64>> {
        let d = self.direction(factors, grad, segments)?;
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate);
        }
        for (t, v) in theta.iter_mut().zip(&d) {
            *t -= self.hyper.lr * v;
        }
        Ok(d)
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, weight_decay: f64, len: usize) -> Self {
        Self {
            lr,
            momentum: SGD_MOMENTUM,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    /// Returns the applied direction (`θ_old − θ_new = η·dir`).
    pub fn step(&mut self, grad: &[f64], theta: &mut [f64]) -> Vec<f64> {
        for ((v, &g), &t) in self.velocity.iter_mut().zip(grad).zip(theta.iter()) {
            *v = self.momentum * *v + g + self.weight_decay * t;
        }
        for (t, v) in theta.iter_mut().zip(&self.velocity) {
            *t -= self.lr * v;
        }
        self.velocity.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, len: usize) -> Self {
        Self {
            lr,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn step(&mut self, grad: &[f64], theta: &mut [f64]) -> Vec<f64> {
        self.steps = self.steps.saturating_add(1);
        let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
        let mut dir = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let g = grad[i] + self.weight_decay * theta[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            dir[i] = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
            theta[i] -= self.lr * dir[i];
        }
        dir
    }
}

/// A first-order rule chosen at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum FirstOrder {
    Sgd(Sgd),
    Adam(Adam),
}

impl FirstOrder {
    pub fn step(&mut self, grad: &[f64], theta: &mut [f64]) -> Vec<f64> {
        match self {
            FirstOrder::Sgd(s) => s.step(grad, theta),
            FirstOrder::Adam(a) => a.step(grad, theta),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            FirstOrder::Sgd(s) => s.lr,
            FirstOrder::Adam(a) => a.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::{random_matrix, random_spd};
    use crate::numerics::{dot, kron, rel_l2};
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn one_layer(rows: usize, cols: usize) -> Vec<LayerSegment> {
        vec![LayerSegment { offset: 0, rows, cols }]
    }

    fn factors(a: DenseMatrix, b: DenseMatrix) -> KroneckerFactors {
        KroneckerFactors {
            a: vec![a],
            b: vec![b],
            dt: 1.0,
            grid: vec![],
        }
    }

    fn state(alpha: f64, eps: f64, segs: &[LayerSegment]) -> SnoptState {
        let mut h = SnoptHyper::new(1.0, eps);
        h.alpha = alpha;
        SnoptState::new(h, segs).unwrap()
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let segs = one_layer(2, 3);
        let mut s = state(0.75, 0.1, &segs);
        s.amortized[0].as_mut_slice().fill(1.0);
        let f = factors(DenseMatrix::identity(3), DenseMatrix::identity(2));
        let mut theta = vec![0.5; 6];
        s.step(&f, &[0.0; 6], &segs, &mut theta).unwrap();
        assert_eq!(theta, vec![0.5; 6]);
        assert!(s.amortized[0].as_slice().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn identity_factors_give_elementwise_rule() {
        let segs = one_layer(2, 2);
        let mut s = state(0.0, 0.1, &segs);
        let f = factors(DenseMatrix::identity(2), DenseMatrix::identity(2));
        let g = [0.5, -1.0, 2.0, 0.1];
        let d = s.direction(&f, &g, &segs).unwrap();
        for (di, gi) in d.iter().zip(g) {
            assert!((di - gi / (gi * gi + 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_behaviour_with_identity_factors() {
        let segs = one_layer(1, 3);
        let f = factors(DenseMatrix::identity(3), DenseMatrix::identity(1));
        let g = [0.3, -0.7, 1.1];
        let beta = 4.0;
        let gb: Vec<f64> = g.iter().map(|v| beta * v).collect();
        let d = state(0.0, 0.05, &segs).direction(&f, &gb, &segs).unwrap();
        for (di, gi) in d.iter().zip(g) {
            assert_eq!(*di, beta * gi / (beta * beta * gi * gi + 0.05));
        }
    }

    /// `(U_A⊗U_B) diag(vec(X²)+ε)⁻¹ (U_A⊗U_B)ᵀ g` assembled densely.
    fn dense_reference(a: &DenseMatrix, b: &DenseMatrix, g: &[f64], eps: f64) -> Vec<f64> {
        let ea = sym_eigen(a).unwrap();
        let eb = sym_eigen(b).unwrap();
        let u = kron(&ea.vectors, &eb.vectors);
        let rotated = u.tr_matvec(g);
        let scaled: Vec<f64> = rotated.iter().map(|x| x / (x * x + eps)).collect();
        u.matvec(&scaled)
    }

    #[test]
    fn matches_dense_eigenbasis_assembly() {
        let mut rng = SplitMix64::new(99);
        for (ra, rb) in [(2, 2), (3, 2), (5, 4), (8, 8), (4, 7)] {
            let a = random_spd(&mut rng, ra);
            let b = random_spd(&mut rng, rb);
            let g = random_matrix(&mut rng, rb, ra).into_vec();
            let segs = one_layer(rb, ra);
            let d = state(0.0, 0.03, &segs).direction(&factors(a.clone(), b.clone()), &g, &segs).unwrap();
            assert!(rel_l2(&d, &dense_reference(&a, &b, &g, 0.03)) < 1e-8);
        }
    }

    #[test]
    fn sgd_and_adam_hand_computations() {
        let mut theta = vec![1.0, 2.0];
        Sgd::new(0.1, 0.0, 2).step(&[0.0, 0.0], &mut theta);
        assert_eq!(theta, vec![1.0, 2.0]);
        Sgd::new(0.1, 0.0, 2).step(&[1.0, 0.0], &mut theta);
        assert_eq!(theta, vec![0.9, 2.0]);

        let mut sgd = Sgd::new(0.1, 0.0, 1);
        let mut t = vec![0.0];
        sgd.step(&[1.0], &mut t);
        sgd.step(&[1.0], &mut t);
        assert!((t[0] - -(0.1 + 0.1 * 1.9)).abs() < 1e-15);

        let mut th = vec![0.0, 0.0];
        Adam::new(0.01, 0.0, 2).step(&[0.0, 0.0], &mut th);
        assert_eq!(th, vec![0.0, 0.0]);
        // First step: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + eps).
        let mut th = vec![0.0, 0.0];
        Adam::new(0.01, 0.0, 2).step(&[0.5, -2.0], &mut th);
        assert!((th[0] - -0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((th[1] - 0.01 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn bad_hyperparameters() {
        let segs = one_layer(1, 1);
        assert!(SnoptState::new(SnoptHyper::new(0.1, 0.0), &segs).is_err());
        let mut h = SnoptHyper::new(0.1, 0.1);
        h.alpha = 1.0;
        assert!(SnoptState::new(h, &segs).is_err());
    }

    proptest! {
        #[test]
        fn direction_is_a_descent_direction(seed in any::<u64>(), eps in 0.01f64..1.0) {
            let mut rng = SplitMix64::new(seed);
            let a = random_spd(&mut rng, 3);
            let b = random_spd(&mut rng, 2);
            let g = random_matrix(&mut rng, 2, 3).into_vec();
            let segs = one_layer(2, 3);
            let d = state(0.0, eps, &segs).direction(&factors(a, b), &g, &segs).unwrap();
            prop_assert!(dot(&d, &g) > 0.0);
        }
    }
}
