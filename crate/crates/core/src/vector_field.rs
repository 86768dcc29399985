//! MLP vector field `F(t, x, θ)` with hand-written vector-Jacobian products.
//!
//! Layer `n` computes `hⁿ = Wⁿ zⁿ + bⁿ` and `zⁿ⁺¹ = σ(hⁿ)`. Its parameters are
//! stored as `vec([Wⁿ bⁿ])` (column-major, bias as the last column), which is
//! the homogeneous-coordinate layout: with `z̃ⁿ = [zⁿ; 1]` the parameter
//! gradient of `qᵀF` for the layer is exactly `z̃ⁿ ⊗ gⁿ`, where
//! `gⁿ = (∂F/∂hⁿ)ᵀ q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => h.tanh(),
            Activation::Relu => h.max(0.0),
            Activation::Softplus => {
                if h > 30.0 {
                    h
                } else if h < -30.0 {
                    h.exp()
                } else {
                    h.exp().ln_1p()
                }
            }
            Activation::Identity => h,
        }
    }

    /// Derivative given the pre-activation `h` and the output `a = σ(h)`.
    #[inline]
    pub fn derivative(self, h: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            // Subgradient 0 at the kink.
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => {
                if h >= 0.0 {
                    1.0 / (1.0 + (-h).exp())
                } else {
                    let e = h.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeInput {
    #[default]
    None,
    /// Append the scalar `t` to the network input.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[m, hidden…, m]`; the first layer additionally sees `t` under `Concat`.
    pub dims: Vec<usize>,
    /// One activation per layer (`dims.len() - 1` entries).
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub time_input: TimeInput,
}

impl MlpSpec {
    /// Hidden layers share `hidden_act`; the output layer is linear.
    pub fn new(dims: &[usize], hidden_act: Activation, time_input: TimeInput) -> Self {
        let layers = dims.len().saturating_sub(1);
        let mut activations = vec![hidden_act; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self {
            dims: dims.to_vec(),
            activations,
            time_input,
        }
    }
}

/// Location of one layer's `vec([W b])` block inside θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSegment {
    pub offset: usize,
    /// Output width (rows of `W`).
    pub rows: usize,
    /// Input width plus one for the bias column.
    pub cols: usize,
}

impl LayerSegment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn w_offset(&self) -> usize {
        self.offset
    }

    pub fn b_offset(&self) -> usize {
        self.offset + self.rows * (self.cols - 1)
    }

    pub fn fan_in(&self) -> usize {
        self.cols - 1
    }
}

/// Flat parameter vector together with its per-layer segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    pub values: Vec<f64>,
    pub segments: Vec<LayerSegment>,
}

impl ParamVec {
    pub fn zeros_like(segments: &[LayerSegment]) -> Self {
        let n = segments.last().map_or(0, |s| s.offset + s.len());
        Self {
            values: vec![0.0; n],
            segments: segments.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        &self.values[self.segments[n].range()]
    }

    pub fn layer_mut(&mut self, n: usize) -> &mut [f64] {
        let r = self.segments[n].range();
        &mut self.values[r]
    }
}

/// Per-layer intermediates of one evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerTrace {
    /// `z[n]` is the input of layer `n`; `z[L]` is the field value.
    pub z: Vec<Vec<f64>>,
    /// Pre-activations `h[n]`.
    pub h: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn output(&self) -> &[f64] {
        self.z.last().map_or(&[], |v| v.as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    segments: Vec<LayerSegment>,
    n_params: usize,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        if spec.dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        if spec.activations.len() != spec.dims.len() - 1 {
            return Err(Error::dims(
                "activation count",
                spec.dims.len() - 1,
                spec.activations.len(),
            ));
        }
        let m = spec.dims[0];
        if *spec.dims.last().unwrap() != m {
            return Err(Error::dims("output width", m, *spec.dims.last().unwrap()));
        }
        if spec.dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut segments = Vec::with_capacity(spec.dims.len() - 1);
        let mut offset = 0;
        for (n, w) in spec.dims.windows(2).enumerate() {
            let fan_in = w[0] + usize::from(n == 0 && spec.time_input == TimeInput::Concat);
            let seg = LayerSegment {
                offset,
                rows: w[1],
                cols: fan_in + 1,
            };
            offset += seg.len();
            segments.push(seg);
        }
        Ok(Self {
            spec,
            segments,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn state_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    pub fn num_layers(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &[LayerSegment] {
        &self.segments
    }

    pub fn zeros(&self) -> ParamVec {
        ParamVec::zeros_like(&self.segments)
    }

    pub fn wrap(&self, values: Vec<f64>) -> Result<ParamVec> {
        if values.len() != self.n_params {
            return Err(Error::dims("parameter vector", self.n_params, values.len()));
        }
        Ok(ParamVec {
            values,
            segments: self.segments.clone(),
        })
    }

    /// Weights uniform in `±sqrt(6/(fan_in+fan_out))`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVec {
        let mut rng = SplitMix64::new(seed);
        let mut p = self.zeros();
        for (n, seg) in self.segments.iter().enumerate() {
            let bound = (6.0 / (seg.fan_in() + seg.rows) as f64).sqrt();
            let w_len = seg.rows * seg.fan_in();
            for v in &mut p.layer_mut(n)[..w_len] {
                *v = rng.uniform(-bound, bound);
            }
        }
        p
    }

    pub fn new_trace(&self) -> LayerTrace {
        let mut z = Vec::with_capacity(self.segments.len() + 1);
        let mut h = Vec::with_capacity(self.segments.len());
        for seg in &self.segments {
            z.push(vec![0.0; seg.fan_in()]);
            h.push(vec![0.0; seg.rows]);
        }
        z.push(vec![0.0; self.state_dim()]);
        LayerTrace { z, h }
    }

    fn check(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(Error::dims("parameter vector", self.n_params, theta.len()));
        }
        if x.len() != self.state_dim() {
            return Err(Error::dims("state", self.state_dim(), x.len()));
        }
        Ok(())
    }

    /// Evaluates `F(t, x, θ)` and returns the value with its layer trace.
    pub fn eval(&self, theta: &[f64], t: f64, x: &[f64]) -> Result<(Vec<f64>, LayerTrace)> {
        self.check(theta, x)?;
        let mut trace = self.new_trace();
        self.forward(theta, t, x, &mut trace);
        Ok((trace.output().to_vec(), trace))
    }

    /// `(∂F/∂x)ᵀ q`
    pub fn vjp_state(&self, theta: &[f64], t: f64, x: &[f64], q: &[f64]) -> Result<Vec<f64>> {
        self.check(theta, x)?;
        if q.len() != self.state_dim() {
            return Err(Error::dims("cotangent", self.state_dim(), q.len()));
        }
        let mut trace = self.new_trace();
        self.forward(theta, t, x, &mut trace);
        let mut scratch = self.new_scratch();
        let mut dx = vec![0.0; self.state_dim()];
        self.backprop(theta, &trace, q, &mut scratch, Some(&mut dx));
        Ok(dx)
    }

    /// `(∂F/∂θ)ᵀ q` together with the per-layer `gⁿ = (∂F/∂hⁿ)ᵀ q`.
    pub fn vjp_param(
        &self,
        theta: &[f64],
        t: f64,
        x: &[f64],
        q: &[f64],
    ) -> Result<(ParamVec, Vec<Vec<f64>>)> {
        self.check(theta, x)?;
        if q.len() != self.state_dim() {
            return Err(Error::dims("cotangent", self.state_dim(), q.len()));
        }
        let mut trace = self.new_trace();
        self.forward(theta, t, x, &mut trace);
        let mut scratch = self.new_scratch();
        self.backprop(theta, &trace, q, &mut scratch, None);
        let mut grad = self.zeros();
        self.accumulate_param_grad(&trace, &scratch.g, 1.0, &mut grad.values);
        Ok((grad, scratch.g))
    }

    // ---- allocation-free kernels used by the sweeps ----

    pub(crate) fn forward(&self, theta: &[f64], t: f64, x: &[f64], trace: &mut LayerTrace) {
        let m = self.state_dim();
        trace.z[0][..m].copy_from_slice(x);
        if self.spec.time_input == TimeInput::Concat {
            trace.z[0][m] = t;
        }
        for (n, seg) in self.segments.iter().enumerate() {
            let act = self.spec.activations[n];
            let w = &theta[seg.range()];
            let (lo, hi) = trace.z.split_at_mut(n + 1);
            let z_in = &lo[n];
            let h = &mut trace.h[n];
            let rows = seg.rows;
            h.copy_from_slice(&w[rows * seg.fan_in()..]);
            for (j, &zj) in z_in.iter().enumerate() {
                let col = &w[j * rows..(j + 1) * rows];
                for (hi_, &wij) in h.iter_mut().zip(col) {
                    *hi_ += wij * zj;
                }
            }
            for (out, &hv) in hi[0].iter_mut().zip(h.iter()) {
                *out = act.apply(hv);
            }
        }
    }

    pub(crate) fn new_scratch(&self) -> Scratch {
        Scratch {
            g: self.segments.iter().map(|s| vec![0.0; s.rows]).collect(),
            dz: self.segments.iter().map(|s| vec![0.0; s.fan_in()]).collect(),
        }
    }

    /// Reverse sweep for cotangent `q`: fills `scratch.g[n] = (∂F/∂hⁿ)ᵀ q`
    /// and, when requested, `dx = (∂F/∂x)ᵀ q`.
    pub(crate) fn backprop(
        &self,
        theta: &[f64],
        trace: &LayerTrace,
        q: &[f64],
        scratch: &mut Scratch,
        dx: Option<&mut [f64]>,
    ) {
        let layers = self.segments.len();
        let mut upstream: &[f64] = q;
        for n in (0..layers).rev() {
            let seg = self.segments[n];
            let act = self.spec.activations[n];
            {
                let g = &mut scratch.g[n];
                let (h, a) = (&trace.h[n], &trace.z[n + 1]);
                for i in 0..seg.rows {
                    g[i] = upstream[i] * act.derivative(h[i], a[i]);
                }
            }
            if n == 0 && dx.is_none() {
                break;
            }
            let w = &theta[seg.range()];
            let g = &scratch.g[n];
            let dz = &mut scratch.dz[n];
            for (j, d) in dz.iter_mut().enumerate() {
                let col = &w[j * seg.rows..(j + 1) * seg.rows];
                *d = col.iter().zip(g).map(|(a, b)| a * b).sum();
            }
            upstream = &scratch.dz[n];
        }
        if let Some(dx) = dx {
            let m = self.state_dim();
            dx.copy_from_slice(&scratch.dz[0][..m]);
        }
    }

    /// `out += scale · z̃ⁿ ⊗ gⁿ` for every layer.
    pub(crate) fn accumulate_param_grad(
        &self,
        trace: &LayerTrace,
        g: &[Vec<f64>],
        scale: f64,
        out: &mut [f64],
    ) {
        for (n, seg) in self.segments.iter().enumerate() {
            let block = &mut out[seg.range()];
            let gn = &g[n];
            let rows = seg.rows;
            for (j, &zj) in trace.z[n].iter().enumerate() {
                let s = scale * zj;
                for (b, &gi) in block[j * rows..(j + 1) * rows].iter_mut().zip(gn) {
                    *b += s * gi;
                }
            }
            for (b, &gi) in block[rows * seg.fan_in()..].iter_mut().zip(gn) {
                *b += scale * gi;
            }
        }
    }

    /// Homogeneous layer input `[zⁿ; 1]`.
    pub fn homogeneous_input(trace: &LayerTrace, n: usize) -> Vec<f64> {
        let mut v = trace.z[n].clone();
        v.push(1.0);
        v
    }
}

/// Reusable buffers for [`Mlp::backprop`].
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    pub g: Vec<Vec<f64>>,
    pub dz: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{kron_vec, rel_l2};
    use proptest::prelude::*;

    fn tanh_net(dims: &[usize], time: TimeInput) -> Mlp {
        Mlp::new(MlpSpec::new(dims, Activation::Tanh, time)).unwrap()
    }

    /// Straightforward nested-loop forward pass over row-major weights.
    fn reference_forward(mlp: &Mlp, theta: &[f64], t: f64, x: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        if mlp.spec().time_input == TimeInput::Concat {
            z.push(t);
        }
        for (n, seg) in mlp.segments().iter().enumerate() {
            let blk = &theta[seg.range()];
            let mut next = Vec::new();
            for i in 0..seg.rows {
                let mut acc = blk[seg.rows * seg.fan_in() + i];
                for j in 0..seg.fan_in() {
                    acc += blk[j * seg.rows + i] * z[j];
                }
                next.push(mlp.spec().activations[n].apply(acc));
            }
            z = next;
        }
        z
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn layout_partitions_params() {
        let mlp = tanh_net(&[2, 4, 2], TimeInput::Concat);
        let s = mlp.segments();
        assert_eq!(s[0], LayerSegment { offset: 0, rows: 4, cols: 4 });
        assert_eq!(s[1], LayerSegment { offset: 16, rows: 2, cols: 5 });
        assert_eq!(mlp.num_params(), 26);
        assert_eq!(s[0].b_offset(), 12);
    }

    #[test]
    fn zero_params_give_zero_field() {
        let spec = MlpSpec {
            dims: vec![3, 5, 3],
            activations: vec![Activation::Identity; 2],
            time_input: TimeInput::Concat,
        };
        let mlp = Mlp::new(spec).unwrap();
        let (f, _) = mlp.eval(&mlp.zeros().values, 0.7, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(f, vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let spec = MlpSpec {
            dims: vec![2, 2],
            activations: vec![Activation::Identity],
            time_input: TimeInput::None,
        };
        let mlp = Mlp::new(spec).unwrap();
        // vec([I 0]) column-major
        let theta = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let (f, trace) = mlp.eval(&theta, 0.0, &[0.3, -0.4]).unwrap();
        assert_eq!(f, vec![0.3, -0.4]);
        assert_eq!(trace.h[0], f);
    }

    #[test]
    fn forward_matches_reference_seed7() {
        let mlp = tanh_net(&[2, 4, 2], TimeInput::None);
        let theta = mlp.init_params(7);
        let (f, trace) = mlp.eval(&theta.values, 0.0, &[0.5, -1.2]).unwrap();
        assert_eq!(f, reference_forward(&mlp, &theta.values, 0.0, &[0.5, -1.2]));
        // Replaying the chain from the trace is bit-exact.
        for (n, seg) in mlp.segments().iter().enumerate() {
            let blk = theta.layer(n);
            for i in 0..seg.rows {
                let mut acc = blk[seg.rows * seg.fan_in() + i];
                for j in 0..seg.fan_in() {
                    acc += blk[j * seg.rows + i] * trace.z[n][j];
                }
                assert_eq!(acc, trace.h[n][i]);
                assert_eq!(mlp.spec().activations[n].apply(acc), trace.z[n + 1][i]);
            }
        }
    }

    #[test]
    fn vjp_zero_cotangent() {
        let mlp = tanh_net(&[2, 4, 2], TimeInput::Concat);
        let theta = mlp.init_params(1).values;
        assert_eq!(mlp.vjp_state(&theta, 0.1, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![0.0; 2]);
        let (g, _) = mlp.vjp_param(&theta, 0.1, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_field_vjps() {
        let spec = MlpSpec {
            dims: vec![2, 2],
            activations: vec![Activation::Identity],
            time_input: TimeInput::None,
        };
        let mlp = Mlp::new(spec).unwrap();
        // A = [[1, 2], [3, 4]], b = 0
        let theta = [1.0, 3.0, 2.0, 4.0, 0.0, 0.0];
        let x = [0.7, -0.2];
        let q = [1.5, -0.5];
        let dx = mlp.vjp_state(&theta, 0.0, &x, &q).unwrap();
        assert_eq!(dx, vec![1.0 * 1.5 + 3.0 * -0.5, 2.0 * 1.5 + 4.0 * -0.5]);
        let (g, _) = mlp.vjp_param(&theta, 0.0, &x, &q).unwrap();
        assert_eq!(&g.values[..4], kron_vec(&x, &q).as_slice());
        assert_eq!(&g.values[4..], &q);
    }

    #[test]
    fn vjps_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Softplus] {
            let mlp = Mlp::new(MlpSpec::new(&[3, 6, 5, 3], act, TimeInput::Concat)).unwrap();
            let mut rng = SplitMix64::new(21);
            let theta = mlp.init_params(4).values;
            let theta: Vec<f64> = theta.iter().map(|v| v + 0.1 * rng.uniform(-1.0, 1.0)).collect();
            let x = [0.4, -0.9, 0.2];
            let q = [0.3, 1.1, -0.7];
            let t = 0.35;
            let dx = mlp.vjp_state(&theta, t, &x, &q).unwrap();
            let fd_x = fd_grad(
                |xx| dot(&q, &mlp.eval(&theta, t, xx).unwrap().0),
                &x,
                1e-5,
            );
            assert!(rel_l2(&dx, &fd_x) < 1e-6);
            let (gp, _) = mlp.vjp_param(&theta, t, &x, &q).unwrap();
            let fd_p = fd_grad(
                |th| dot(&q, &mlp.eval(th, t, &x).unwrap().0),
                &theta,
                1e-5,
            );
            assert!(rel_l2(&gp.values, &fd_p) < 1e-6);
        }
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(1e-9, 1e-9), 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(Activation::Softplus.apply(1000.0), 1000.0);
        assert!(Activation::Softplus.apply(-1000.0) >= 0.0);
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((Activation::Softplus.derivative(-800.0, 0.0)).abs() < 1e-300);
    }

    #[test]
    fn dimension_errors() {
        let mlp = tanh_net(&[2, 4, 2], TimeInput::None);
        let theta = mlp.zeros().values;
        assert!(matches!(mlp.eval(&theta, 0.0, &[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(mlp.vjp_state(&theta, 0.0, &[1.0, 1.0], &[1.0]).is_err());
        assert!(mlp.vjp_param(&theta[1..], 0.0, &[1.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(Mlp::new(MlpSpec::new(&[2, 3], Activation::Tanh, TimeInput::None)).is_err());
    }

    proptest! {
        #[test]
        fn param_segment_is_kron_of_input_and_g(seed in any::<u64>(), t in -1.0f64..1.0) {
            let mlp = tanh_net(&[2, 5, 3, 2], TimeInput::Concat);
            let theta = mlp.init_params(seed).values;
            let mut rng = SplitMix64::new(seed ^ 1);
            let x = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let q = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let (grad, gs) = mlp.vjp_param(&theta, t, &x, &q).unwrap();
            let (_, trace) = mlp.eval(&theta, t, &x).unwrap();
            for n in 0..mlp.num_layers() {
                let expect = kron_vec(&Mlp::homogeneous_input(&trace, n), &gs[n]);
                prop_assert_eq!(grad.layer(n), expect.as_slice());
            }
        }

        #[test]
        fn vjps_are_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mlp = tanh_net(&[2, 4, 2], TimeInput::Concat);
            let theta = mlp.init_params(seed).values;
            let x = [0.3, -0.1];
            let (q1, q2) = ([1.0, -0.5], [0.2, 0.9]);
            let q: Vec<f64> = q1.iter().zip(&q2).map(|(u, v)| a * u + b * v).collect();
            let lin = |f: &dyn Fn(&[f64]) -> Vec<f64>| {
                let (v1, v2, v) = (f(&q1), f(&q2), f(&q));
                v.iter().zip(v1.iter().zip(&v2)).all(|(z, (p, r))| (z - (a * p + b * r)).abs() < 1e-12)
            };
            prop_assert!(lin(&|qq| mlp.vjp_state(&theta, 0.2, &x, qq).unwrap()));
            prop_assert!(lin(&|qq| mlp.vjp_param(&theta, 0.2, &x, qq).unwrap().0.values));
        }
    }
}
