//! LeakyReLU multilayer perceptrons with hand-written reverse mode.
//!
//! Besides the usual forward/backward pair, the networks expose the two
//! derivative quantities the velocity objective needs:
//!
//! * a Jacobian-vector product `J(x)·u` together with its parameter gradient
//!   (used for `∇z·∇g`), and
//! * the exact Jacobian trace `tr J_f(x)` together with its parameter gradient.
//!
//! LeakyReLU is piecewise linear, so the activation pattern at a point is
//! locally constant in both the input and the parameters; every derivative
//! below treats the pattern as constant, which is exact almost everywhere.
//!
//! Everything is batched: one row per particle.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domains::ConstraintDomain;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Multilayer perceptron: LeakyReLU(0.1) on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Weights uniform in `±1/√fan_in`, zero biases, output layer scaled by 0.1.
pub fn init_mlp(layer_sizes: &[usize], seed: u64) -> Result<Mlp> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "an MLP needs at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidParameter(format!("zero-width layer in {layer_sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = layer_sizes.len() - 1;
    let layers = layer_sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let scale = if i + 1 == n_layers { OUTPUT_INIT_SCALE } else { 1.0 };
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| scale * rng.random_range(-bound..bound));
            Dense { weight, bias: Array1::zeros(fan_out) }
        })
        .collect();
    Ok(Mlp { layers })
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// LeakyReLU derivative (1 or 0.1) of each hidden layer.
    slopes: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Tangents propagated alongside a [`Tape`].
#[derive(Debug, Clone)]
pub struct JvpTape {
    /// Tangent entering each layer.
    tangents: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("empty layer list".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::ShapeMismatch(format!("layer {i}: bias/weight rows differ")));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::ShapeMismatch(format!("layer {i}: input width mismatch")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.nrows()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
            .collect();
        Self { layers }
    }

    /// Parameter tensors in a fixed order (weight, bias per layer).
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layer_sizes() == other.layer_sizes()
    }

    /// Forward pass for a single point.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.forward_batch(batch).output.row(0).to_vec())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Tape {
        assert_eq!(x.ncols(), self.input_dim(), "batch width must equal the network input size");
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut slopes = Vec::with_capacity(last);
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Array2::zeros((a.nrows(), layer.weight.nrows()));
            general_mat_mul(1.0, &a, &layer.weight.t(), 0.0, &mut z);
            z += &layer.bias;
            inputs.push(a);
            if i < last {
                let slope = z.mapv(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE });
                z *= &slope;
                slopes.push(slope);
            }
            a = z;
        }
        Tape { inputs, slopes, output: a }
    }

    /// Smallest `|pre-activation|` over hidden units, per row. Points with a
    /// tiny margin sit near a LeakyReLU kink.
    pub fn kink_margin(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut margin = Array1::from_elem(x.nrows(), f64::INFINITY);
        let mut a = x.to_owned();
        for layer in &self.layers[..last] {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            for (m, row) in margin.iter_mut().zip(z.rows()) {
                *m = row.iter().fold(*m, |acc, v| acc.min(v.abs()));
            }
            a = z.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        }
        margin
    }

    /// Accumulates parameter gradients for output cotangent `out_cot` into
    /// `grad` and returns the input cotangent.
    pub fn backward(&self, tape: &Tape, out_cot: ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut g = out_cot.to_owned();
        for l in (0..=last).rev() {
            if l < last {
                g *= &tape.slopes[l];
            }
            let gl = &mut grad.layers[l];
            general_mat_mul(1.0, &g.t(), &tape.inputs[l], 1.0, &mut gl.weight);
            gl.bias += &g.sum_axis(Axis(0));
            let mut next = Array2::zeros((g.nrows(), self.layers[l].weight.ncols()));
            general_mat_mul(1.0, &g, &self.layers[l].weight, 0.0, &mut next);
            g = next;
        }
        g
    }

    /// `J(x_p)·u_p` for every row `p`, reusing the activation pattern in `tape`.
    pub fn jvp(&self, tape: &Tape, tangent: ArrayView2<f64>) -> JvpTape {
        let last = self.layers.len() - 1;
        let mut tangents = Vec::with_capacity(self.layers.len());
        let mut u = tangent.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut t = Array2::zeros((u.nrows(), layer.weight.nrows()));
            general_mat_mul(1.0, &u, &layer.weight.t(), 0.0, &mut t);
            if l < last {
                t *= &tape.slopes[l];
            }
            tangents.push(u);
            u = t;
        }
        JvpTape { tangents, output: u }
    }

    /// Parameter gradient of `Σ_p ⟨out_cot_p, J(x_p)·u_p⟩`, accumulated into `grad`.
    /// Biases do not enter a JVP.
    pub fn jvp_backward(&self, tape: &Tape, jvp: &JvpTape, out_cot: ArrayView2<f64>, grad: &mut Mlp) {
        let last = self.layers.len() - 1;
        let mut g = out_cot.to_owned();
        for l in (0..=last).rev() {
            if l < last {
                g *= &tape.slopes[l];
            }
            general_mat_mul(1.0, &g.t(), &jvp.tangents[l], 1.0, &mut grad.layers[l].weight);
            if l > 0 {
                let mut next = Array2::zeros((g.nrows(), self.layers[l].weight.ncols()));
                general_mat_mul(1.0, &g, &self.layers[l].weight, 0.0, &mut next);
                g = next;
            }
        }
    }

    /// Two hidden layers with a square Jacobian: the trace collapses to a
    /// bilinear form in the two activation patterns.
    fn has_bilinear_trace(&self) -> bool {
        self.layers.len() == 3 && self.input_dim() == self.output_dim()
    }

    /// `tr J(x_p)` per row.
    pub fn jacobian_trace(&self, tape: &Tape) -> Result<Array1<f64>> {
        self.check_square()?;
        if self.has_bilinear_trace() {
            Ok(self.trace_bilinear(tape))
        } else {
            Ok(self.trace_by_columns(tape))
        }
    }

    /// Same as [`Mlp::jacobian_trace`] but always through `d` JVP passes.
    pub fn jacobian_trace_by_columns(&self, tape: &Tape) -> Result<Array1<f64>> {
        self.check_square()?;
        Ok(self.trace_by_columns(tape))
    }

    /// Parameter gradient of `Σ_p c_p · tr J(x_p)`, accumulated into `grad`.
    pub fn jacobian_trace_backward(&self, tape: &Tape, cot: &Array1<f64>, grad: &mut Mlp) -> Result<()> {
        self.check_square()?;
        if self.has_bilinear_trace() {
            self.trace_bilinear_backward(tape, cot, grad);
        } else {
            self.trace_by_columns_backward(tape, cot, grad);
        }
        Ok(())
    }

    pub fn jacobian_trace_backward_by_columns(&self, tape: &Tape, cot: &Array1<f64>, grad: &mut Mlp) -> Result<()> {
        self.check_square()?;
        self.trace_by_columns_backward(tape, cot, grad);
        Ok(())
    }

    fn check_square(&self) -> Result<()> {
        if self.input_dim() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "Jacobian trace needs a square map, got {} -> {}",
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn basis_tangent(m: usize, d: usize, i: usize) -> Array2<f64> {
        let mut t = Array2::zeros((m, d));
        t.column_mut(i).fill(1.0);
        t
    }

    fn trace_by_columns(&self, tape: &Tape) -> Array1<f64> {
        let (m, d) = (tape.output.nrows(), self.input_dim());
        let mut tr = Array1::zeros(m);
        for i in 0..d {
            let jvp = self.jvp(tape, Self::basis_tangent(m, d, i).view());
            tr += &jvp.output.column(i);
        }
        tr
    }

    fn trace_by_columns_backward(&self, tape: &Tape, cot: &Array1<f64>, grad: &mut Mlp) {
        let (m, d) = (tape.output.nrows(), self.input_dim());
        for i in 0..d {
            let jvp = self.jvp(tape, Self::basis_tangent(m, d, i).view());
            let mut out_cot = Array2::zeros((m, d));
            out_cot.column_mut(i).assign(cot);
            self.jvp_backward(tape, &jvp, out_cot.view(), grad);
        }
    }

    /// With `J = W₃ S₂ W₂ S₁ W₁`, `tr J = s₂ᵀ (W₂ ∘ (W₁W₃)ᵀ) s₁`.
    fn bilinear_kernel(&self) -> (Array2<f64>, Array2<f64>) {
        let (w1, w2, w3) = (&self.layers[0].weight, &self.layers[1].weight, &self.layers[2].weight);
        let a = w1.dot(w3);
        let b = w2 * &a.t();
        (a, b)
    }

    fn trace_bilinear(&self, tape: &Tape) -> Array1<f64> {
        let (_, b) = self.bilinear_kernel();
        let (s1, s2) = (&tape.slopes[0], &tape.slopes[1]);
        let mut q = Array2::zeros((s1.nrows(), b.nrows()));
        general_mat_mul(1.0, s1, &b.t(), 0.0, &mut q);
        q *= s2;
        q.sum_axis(Axis(1))
    }

    fn trace_bilinear_backward(&self, tape: &Tape, cot: &Array1<f64>, grad: &mut Mlp) {
        let (a, _) = self.bilinear_kernel();
        let (s1, s2) = (&tape.slopes[0], &tape.slopes[1]);
        let (w1, w2, w3) = (&self.layers[0].weight, &self.layers[1].weight, &self.layers[2].weight);
        let weighted = s2 * &cot.view().insert_axis(Axis(1));
        // ∂/∂B of Σ c_p s₂ᵀ B s₁
        let mut sb = Array2::zeros(w2.raw_dim());
        general_mat_mul(1.0, &weighted.t(), s1, 0.0, &mut sb);
        grad.layers[1].weight += &(&sb * &a.t());
        let da = (&sb * w2).reversed_axes();
        general_mat_mul(1.0, &da, &w3.t(), 1.0, &mut grad.layers[0].weight);
        general_mat_mul(1.0, &w1.t(), &da, 1.0, &mut grad.layers[2].weight);
    }
}

/// The interior velocity network pair: `h = f − z²·∇g`. Dropping `z` gives
/// `h = f`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNets {
    pub f: Mlp,
    pub z: Option<Mlp>,
}

impl VelocityNets {
    /// `f: ℝᵈ → ℝᵈ` and `z: ℝᵈ → ℝ` with the given hidden widths.
    pub fn new(dim: usize, f_hidden: &[usize], z_hidden: Option<&[usize]>, f_seed: u64, z_seed: u64) -> Result<Self> {
        let mut f_sizes = vec![dim];
        f_sizes.extend_from_slice(f_hidden);
        f_sizes.push(dim);
        let f = init_mlp(&f_sizes, f_seed)?;
        let z = match z_hidden {
            Some(hidden) => {
                let mut z_sizes = vec![dim];
                z_sizes.extend_from_slice(hidden);
                z_sizes.push(1);
                Some(init_mlp(&z_sizes, z_seed)?)
            }
            None => None,
        };
        Self::from_parts(f, z)
    }

    pub fn from_parts(f: Mlp, z: Option<Mlp>) -> Result<Self> {
        if f.input_dim() != f.output_dim() {
            return Err(Error::ShapeMismatch("f_net must map ℝᵈ to ℝᵈ".into()));
        }
        if let Some(z) = &z {
            if z.input_dim() != f.input_dim() || z.output_dim() != 1 {
                return Err(Error::ShapeMismatch("z_net must map ℝᵈ to ℝ".into()));
            }
        }
        Ok(Self { f, z })
    }

    pub fn dim(&self) -> usize {
        self.f.input_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self { f: self.f.zeros_like(), z: self.z.as_ref().map(Mlp::zeros_like) }
    }

    pub fn num_params(&self) -> usize {
        self.f.num_params() + self.z.as_ref().map_or(0, Mlp::num_params)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.f.tensors();
        if let Some(z) = &self.z {
            t.extend(z.tensors());
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.f.tensors_mut();
        if let Some(z) = &mut self.z {
            t.extend(z.tensors_mut());
        }
        t
    }

    /// Batched `h` given precomputed `∇g` rows.
    pub fn h_batch(&self, x: ArrayView2<f64>, grad_g: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.f.forward_batch(x).output;
        if let Some(z) = &self.z {
            let zt = z.forward_batch(x);
            let zz = zt.output.column(0).mapv(|v| v * v);
            h -= &(&grad_g * &zz.insert_axis(Axis(1)));
        }
        h
    }

    /// Smallest kink margin over both networks, per row.
    pub fn kink_margin(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut m = self.f.kink_margin(x);
        if let Some(z) = &self.z {
            m.zip_mut_with(&z.kink_margin(x), |a, b| *a = a.min(*b));
        }
        m
    }
}

/// `h(x) = f(x) − z(x)²·∇g(x)`.
pub fn h_net_eval(nets: &VelocityNets, domain: &ConstraintDomain, x: &[f64]) -> Vec<f64> {
    let grad = domain.grad_g(x);
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
    let gv = ArrayView2::from_shape((1, x.len()), &grad).expect("row");
    nets.h_batch(xv, gv).row(0).to_vec()
}

/// Exact `∇·h = tr J_f − (2 z ∇z·∇g + z² Δg)`.
pub fn divergence_h(nets: &VelocityNets, domain: &ConstraintDomain, x: &[f64]) -> f64 {
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
    let f_tape = nets.f.forward_batch(xv);
    let mut div = nets.f.jacobian_trace(&f_tape).expect("f_net is square")[0];
    if let Some(z) = &nets.z {
        let grad = domain.grad_g(x);
        let z_tape = z.forward_batch(xv);
        let zval = z_tape.output[[0, 0]];
        let gv = ArrayView2::from_shape((1, x.len()), &grad).expect("row");
        let dz_dot_grad = z.jvp(&z_tape, gv).output[[0, 0]];
        div -= 2.0 * zval * dz_dot_grad + zval * zval * domain.laplacian_g(x);
    }
    div
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(shapes: &[&[f64]], config: AdamConfig) -> Self {
        let first: Vec<Vec<f64>> = shapes.iter().map(|t| vec![0.0; t.len()]).collect();
        Self { second: first.clone(), first, step: 0, config }
    }

    pub fn for_nets(nets: &VelocityNets, config: AdamConfig) -> Self {
        Self::new(&nets.tensors(), config)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` (descent direction).
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: {} accumulators, {} params, {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::ShapeMismatch(format!("adam: tensor {i} length differs")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam step on a velocity network pair.
pub fn adam_step(params: &mut VelocityNets, grads: &VelocityNets, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.f.same_shape(&grads.f) || params.z.is_some() != grads.z.is_some() {
        return Err(Error::ShapeMismatch("gradient does not match parameter layout".into()));
    }
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    state.update(&mut p, &g, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{make_block, make_cardioid, make_double_moon, make_ring};
    use crate::oracle::finite_diff;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, scale: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, 2), |_| rng.random_range(-scale..scale))
    }

    /// Randomizes biases so the activation pattern is not anchored at the origin.
    fn jitter_biases(net: &mut Mlp, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in net.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp(&[2, 16, 16, 2], 7).unwrap();
        let b = init_mlp(&[2, 16, 16, 2], 7).unwrap();
        let c = init_mlp(&[2, 16, 16, 2], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let out = a.forward(&[0.0, 0.0]).unwrap();
        assert!(out.iter().all(|v| v.is_finite()) && out.iter().map(|v| v * v).sum::<f64>().sqrt() < 10.0);
        assert!(init_mlp(&[], 1).is_err());
        assert!(init_mlp(&[3], 1).is_err());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let a = init_mlp(&[2, 4, 2], 0).unwrap();
        assert!(matches!(a.forward(&[1.0, 2.0, 3.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = init_mlp(&[2, 8, 3], 1).unwrap();
        for l in net.layers_mut() {
            l.weight.fill(0.0);
        }
        net.layers_mut()[1].bias.assign(&array![1.0, -2.0, 0.5]);
        for x in [[0.0, 0.0], [3.0, -1.0]] {
            assert_eq!(net.forward(&x).unwrap(), vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn single_linear_layer() {
        let w = array![[1.0, 2.0], [-3.0, 0.5]];
        let net = Mlp::from_layers(vec![Dense { weight: w, bias: array![0.25, -1.0] }]).unwrap();
        assert_eq!(net.forward(&[2.0, 1.0]).unwrap(), vec![4.25, -6.5]);
    }

    #[test]
    fn two_hidden_layers_match_hand_computation() {
        let l1 = Dense { weight: array![[1.0, -1.0], [0.5, 2.0]], bias: array![0.0, -1.0] };
        let l2 = Dense { weight: array![[1.0, 1.0], [-2.0, 1.0]], bias: array![0.5, 0.0] };
        let l3 = Dense { weight: array![[1.0, 0.0], [3.0, -1.0]], bias: array![0.0, 1.0] };
        let net = Mlp::from_layers(vec![l1, l2, l3]).unwrap();
        // x = (1, 2): pre1 = (-1, 3.5) -> (-0.1, 3.5); pre2 = (3.9, 3.7) -> same;
        // out = (3.9, 3·3.9 − 3.7 + 1) = (3.9, 9.0)
        let out = net.forward(&[1.0, 2.0]).unwrap();
        assert!((out[0] - 3.9).abs() < 1e-12 && (out[1] - 9.0).abs() < 1e-12);
    }

    fn linear_map(m: Array2<f64>) -> Mlp {
        let id = Array2::eye(2);
        Mlp::from_layers(vec![
            Dense { weight: id.clone(), bias: array![10.0, 10.0] },
            Dense { weight: id, bias: array![0.0, 0.0] },
            Dense { weight: m, bias: array![-10.0, -10.0] },
        ])
        .unwrap()
    }

    #[test]
    fn divergence_of_linear_maps() {
        let ring = make_ring();
        let ident = VelocityNets::from_parts(linear_map(Array2::eye(2)), None).unwrap();
        let swap = VelocityNets::from_parts(linear_map(array![[0.0, 1.0], [1.0, 0.0]]), None).unwrap();
        for x in [[0.3, 0.4], [1.2, -1.1]] {
            assert!((divergence_h(&ident, &ring, &x) - 2.0).abs() < 1e-12);
            assert!(divergence_h(&swap, &ring, &x).abs() < 1e-12);
        }
    }

    #[test]
    fn h_net_composition() {
        let ring = make_ring();
        let nets = VelocityNets::new(2, &[8, 8], Some(&[8, 8]), 1, 2).unwrap();
        let x = [1.1, 0.7];
        let f = nets.f.forward(&x).unwrap();
        let z = nets.z.as_ref().unwrap().forward(&x).unwrap()[0];
        let g = ring.grad_g(&x);
        let h = h_net_eval(&nets, &ring, &x);
        for i in 0..2 {
            assert!((h[i] - (f[i] - z * z * g[i])).abs() < 1e-14);
        }
        let no_z = VelocityNets::from_parts(nets.f.clone(), None).unwrap();
        assert_eq!(h_net_eval(&no_z, &ring, &x), f);
    }

    #[test]
    fn reflection_term_points_inward_on_block_face() {
        let block = make_block();
        let nets = VelocityNets::new(2, &[8, 8], Some(&[8, 8]), 3, 4).unwrap();
        let x = [2.0, 0.0];
        let f = nets.f.forward(&x).unwrap();
        let h = h_net_eval(&nets, &block, &x);
        let g = block.grad_g(&x);
        let refl: f64 = (0..2).map(|i| (h[i] - f[i]) * g[i]).sum();
        assert!(refl <= 0.0);
    }

    fn fd_divergence(nets: &VelocityNets, d: &ConstraintDomain, x: &[f64]) -> f64 {
        let jac = finite_diff::jacobian(|p| h_net_eval(nets, d, p), x, 1e-5);
        (0..x.len()).map(|i| jac[i][i]).sum()
    }

    fn regular(d: &ConstraintDomain, x: &[f64]) -> bool {
        match d.name() {
            "block" => (x[0].abs() - x[1].abs()).abs() > 1e-3,
            "cardioid" => x[0].abs() > 1e-3,
            _ => crate::domains::norm(x) > 1e-3,
        }
    }

    #[test]
    fn divergence_matches_finite_differences_on_ring() {
        let ring = make_ring();
        let mut nets = VelocityNets::new(2, &[128, 128], Some(&[128, 128]), 11, 12).unwrap();
        jitter_biases(&mut nets.f, 1);
        jitter_biases(nets.z.as_mut().unwrap(), 2);
        let pts = random_points(400, 2.0, 3);
        let margins = nets.kink_margin(pts.view());
        let mut checked = 0;
        for (x, m) in pts.rows().into_iter().zip(margins.iter()) {
            let x = x.to_vec();
            if !ring.contains(&x) || *m < 1e-3 || checked == 100 {
                continue;
            }
            let a = divergence_h(&nets, &ring, &x);
            let b = fd_divergence(&nets, &ring, &x);
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-2), "{x:?}: {a} vs {b}");
            checked += 1;
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn divergence_matches_fd_all_domains() {
        for (k, d) in [make_ring(), make_cardioid(), make_double_moon(), make_block()].iter().enumerate() {
            for s in 0..3 {
                let mut nets = VelocityNets::new(2, &[32, 32], Some(&[32, 32]), 100 + s, 200 + s).unwrap();
                jitter_biases(&mut nets.f, s + 10);
                let pts = random_points(60, 4.0, (k * 10) as u64 + s);
                let margins = nets.kink_margin(pts.view());
                for (x, m) in pts.rows().into_iter().zip(margins.iter()) {
                    let x = x.to_vec();
                    if *m < 1e-3 || !regular(d, &x) {
                        continue;
                    }
                    let a = divergence_h(&nets, d, &x);
                    let b = fd_divergence(&nets, d, &x);
                    assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-2), "{} {x:?}: {a} vs {b}", d.name());
                }
            }
        }
    }

    #[test]
    fn bilinear_trace_agrees_with_column_trace() {
        for dim in [2usize, 5] {
            let mut net = init_mlp(&[dim, 24, 20, dim], 5).unwrap();
            jitter_biases(&mut net, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = Array2::from_shape_fn((30, dim), |_| rng.random_range(-2.0..2.0));
            let tape = net.forward_batch(x.view());
            let a = net.jacobian_trace(&tape).unwrap();
            let b = net.jacobian_trace_by_columns(&tape).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12 * v.abs().max(1.0));
            }
            let cot = Array1::from_shape_fn(30, |i| (i as f64 * 0.37).sin());
            let mut ga = net.zeros_like();
            let mut gb = net.zeros_like();
            net.jacobian_trace_backward(&tape, &cot, &mut ga).unwrap();
            net.jacobian_trace_backward_by_columns(&tape, &cot, &mut gb).unwrap();
            for (ta, tb) in ga.tensors().iter().zip(gb.tensors()) {
                for (u, v) in ta.iter().zip(tb.iter()) {
                    assert!((u - v).abs() < 1e-10 * v.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn trace_rejects_non_square() {
        let net = init_mlp(&[2, 4, 1], 0).unwrap();
        let tape = net.forward_batch(Array2::zeros((1, 2)).view());
        assert!(net.jacobian_trace(&tape).is_err());
    }

    /// Scalar functional of the network used for parameter-gradient checks:
    /// `Σ_p [⟨a_p, f(x_p)⟩ + c_p tr J(x_p) + ⟨b_p, J(x_p) u_p⟩]`.
    fn functional(net: &Mlp, x: &Array2<f64>, a: &Array2<f64>, c: &Array1<f64>, b: &Array2<f64>, u: &Array2<f64>) -> f64 {
        let tape = net.forward_batch(x.view());
        let tr = net.jacobian_trace(&tape).unwrap();
        let jvp = net.jvp(&tape, u.view());
        (&tape.output * a).sum() + (&tr * c).sum() + (&jvp.output * b).sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for sizes in [vec![2, 12, 10, 2], vec![3, 9, 3], vec![2, 6, 7, 5, 2]] {
            let d = sizes[0];
            let mut net = init_mlp(&sizes, 21).unwrap();
            jitter_biases(&mut net, 22);
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let mut rnd = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
            let x = rnd(8, d);
            let a = rnd(8, d);
            let b = rnd(8, d);
            let u = rnd(8, d);
            let c = Array1::from_shape_fn(8, |i| 0.3 * i as f64 - 1.0);
            let margin = net.kink_margin(x.view()).iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(margin > 1e-4, "test instance too close to a kink: {margin}");

            let tape = net.forward_batch(x.view());
            let mut grad = net.zeros_like();
            net.backward(&tape, a.view(), &mut grad);
            net.jacobian_trace_backward(&tape, &c, &mut grad).unwrap();
            let jvp = net.jvp(&tape, u.view());
            net.jvp_backward(&tape, &jvp, b.view(), &mut grad);

            let analytic: Vec<f64> = grad.tensors().concat();
            let mut numeric = Vec::with_capacity(analytic.len());
            let step = 1e-6;
            let n_tensors = net.tensors().len();
            for t in 0..n_tensors {
                let len = net.tensors()[t].len();
                for j in 0..len {
                    let mut plus = net.clone();
                    plus.tensors_mut()[t][j] += step;
                    let mut minus = net.clone();
                    minus.tensors_mut()[t][j] -= step;
                    numeric.push((functional(&plus, &x, &a, &c, &b, &u) - functional(&minus, &x, &a, &c, &b, &u)) / (2.0 * step));
                }
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-6, "{sizes:?}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn input_cotangent_matches_fd() {
        let mut net = init_mlp(&[2, 10, 10, 1], 4).unwrap();
        jitter_biases(&mut net, 5);
        let x = [0.4, -0.7];
        let tape = net.forward_batch(ArrayView2::from_shape((1, 2), &x).unwrap());
        let mut grad = net.zeros_like();
        let gx = net.backward(&tape, Array2::ones((1, 1)).view(), &mut grad);
        let fd = finite_diff::gradient(|p| net.forward(p).unwrap()[0], &x, 1e-6);
        assert!((gx[[0, 0]] - fd[0]).abs() < 1e-8 && (gx[[0, 1]] - fd[1]).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut nets = VelocityNets::new(2, &[4], Some(&[4]), 1, 2).unwrap();
        let before = nets.clone();
        let grads = nets.zeros_like();
        let mut state = AdamState::for_nets(&nets, AdamConfig::default());
        adam_step(&mut nets, &grads, &mut state, 0.01).unwrap();
        assert_eq!(nets, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [3.0, -0.01, 0.0];
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        state.update(&mut [&mut p[..]], &[&g[..]], 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-5);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adam_two_steps_hand_recursion() {
        let (b1, b2, eps, lr, grad) = (0.9_f64, 0.999_f64, 1e-8, 0.05, 0.4_f64);
        let mut p = vec![1.0];
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        state.update(&mut [&mut p[..]], &[&[grad][..]], lr).unwrap();
        state.update(&mut [&mut p[..]], &[&[grad][..]], lr).unwrap();
        let mut expected = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad * grad;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            expected -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut nets = VelocityNets::new(2, &[4], Some(&[4]), 1, 2).unwrap();
        let other = VelocityNets::new(2, &[5], Some(&[4]), 1, 2).unwrap();
        let mut state = AdamState::for_nets(&nets, AdamConfig::default());
        assert!(adam_step(&mut nets, &other.zeros_like(), &mut state, 0.1).is_err());
        let mut p = [0.0; 3];
        assert!(state.update(&mut [&mut p[..]], &[&[0.0; 3][..]], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn bias_free_forward_is_positively_homogeneous(
            seed in 0u64..1000,
            x0 in -3.0f64..3.0, x1 in -3.0f64..3.0,
            alpha in 0.01f64..20.0,
        ) {
            let mut net = init_mlp(&[2, 16, 16, 2], seed).unwrap();
            for layer in net.layers_mut() {
                layer.bias.fill(0.0);
            }
            let a = net.forward(&[alpha * x0, alpha * x1]).unwrap();
            let b = net.forward(&[x0, x1]).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - alpha * v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}
