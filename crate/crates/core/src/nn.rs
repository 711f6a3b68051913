//! Small tanh multilayer perceptrons with hand-derived derivatives.
//!
//! The network graph is fixed, so every derivative is written out
//! structurally instead of going through a tape:
//!
//! * [`Mlp::vjp`]: reverse mode, `⟨c, f(x)⟩` differentiated in `x` and the
//!   parameters.
//! * [`Mlp::jvp`]: forward mode with dual numbers, `J(x) v`.
//! * [`Mlp::jvp_param_gradient`]: reverse sweep through the forward-mode pass,
//!   giving parameter gradients of any scalar built from JVP outputs. This
//!   is what makes the distortion regularizer trainable.
//!
//! Batched entry points take one point per column. Tangent batches group
//! `k` consecutive columns per point.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One affine layer `u = W h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Dense {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.len()),
        }
    }

    fn affine(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut u = &self.weight * h;
        for mut col in u.column_iter_mut() {
            col += &self.bias;
        }
        u
    }
}

/// Feed-forward network with `tanh` on hidden layers and identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Gradient with the same block structure as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub layers: Vec<Dense>,
}

struct Trace {
    /// activations `h_0 = x, h_1, …, h_{L-1}` feeding each layer
    inputs: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

struct DualTrace {
    primal: Trace,
    /// tangent activations `ḣ_0 = v, …, ḣ_{L-1}`
    tangents: Vec<DMatrix<f64>>,
    /// tangent pre-activations `u̇_0, …, u̇_{L-2}` of the hidden layers
    tangent_pre: Vec<DMatrix<f64>>,
    tangent_output: DMatrix<f64>,
}

fn dtanh(t: f64) -> f64 {
    1.0 - t * t
}

fn d2tanh(t: f64) -> f64 {
    -2.0 * t * (1.0 - t * t)
}

/// Scales each tangent column by the derivative row of its owning point.
fn broadcast_mul(
    tangent: &mut DMatrix<f64>,
    act: &DMatrix<f64>,
    per_point: usize,
    deriv: impl Fn(f64) -> f64,
) {
    for (c, mut col) in tangent.column_iter_mut().enumerate() {
        let a = act.column(c / per_point);
        for (v, t) in col.iter_mut().zip(a.iter()) {
            *v *= deriv(*t);
        }
    }
}

impl Mlp {
    /// Symmetric-uniform fan-in initialization, `U(−1/√fan_in, 1/√fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(
                "network",
                format!("bad layer sizes {sizes:?}"),
            ));
        }
        let layers = sizes
            .windows(2)
            .map(|p| {
                let bound = 1.0 / (p[0] as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(p[1], p[0], |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::from_fn(p[1], |_, _| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network", "at least one layer is required"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::shape(
                    "layer bias",
                    layer.weight.nrows(),
                    layer.bias.len(),
                ));
            }
            if l > 0 && layer.weight.ncols() != layers[l - 1].weight.nrows() {
                return Err(Error::shape(
                    "layer input",
                    layers[l - 1].weight.nrows(),
                    layer.weight.ncols(),
                ));
            }
            if layer
                .weight
                .iter()
                .chain(layer.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::invalid(
                    "network",
                    format!("layer {l} has non-finite parameters"),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weight.nrows()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in block order: layer 0 weight (column-major), layer 0 bias, ...
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "parameter vector",
                self.param_count(),
                flat.len(),
            ));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), rows));
        }
        Ok(())
    }

    fn trace(&self, x: &DMatrix<f64>) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let u = layer.affine(&h);
            inputs.push(h);
            if l == last {
                return Trace { inputs, output: u };
            }
            h = u.map(f64::tanh);
        }
        unreachable!("network has at least one layer")
    }

    fn dual_trace(&self, x: &DMatrix<f64>, tangents: &DMatrix<f64>, per_point: usize) -> DualTrace {
        let primal = self.trace(x);
        let last = self.layers.len() - 1;
        let mut tangent_inputs = Vec::with_capacity(self.layers.len());
        let mut tangent_pre = Vec::with_capacity(last);
        let mut hdot = tangents.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let udot = &layer.weight * &hdot;
            tangent_inputs.push(hdot);
            if l == last {
                return DualTrace {
                    primal,
                    tangents: tangent_inputs,
                    tangent_pre,
                    tangent_output: udot,
                };
            }
            let mut next = udot.clone();
            broadcast_mul(&mut next, &primal.inputs[l + 1], per_point, dtanh);
            tangent_pre.push(udot);
            hdot = next;
        }
        unreachable!("network has at least one layer")
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x.nrows())?;
        Ok(self.trace(x).output)
    }

    /// `(∂⟨c, f⟩/∂x, ∂⟨c, f⟩/∂θ)`.
    pub fn vjp(
        &self,
        x: &DVector<f64>,
        cotangent: &DVector<f64>,
    ) -> Result<(DVector<f64>, ParamGradient)> {
        let (gx, grad) = self.vjp_batch(
            &DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
            &DMatrix::from_column_slice(cotangent.len(), 1, cotangent.as_slice()),
        )?;
        Ok((gx.column(0).into_owned(), grad))
    }

    /// Batched VJP; parameter gradients are summed over the batch.
    pub fn vjp_batch(
        &self,
        x: &DMatrix<f64>,
        cotangent: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, ParamGradient)> {
        self.check_input(x.nrows())?;
        if cotangent.shape() != (self.output_dim(), x.ncols()) {
            return Err(Error::shape(
                "vjp cotangent",
                format!("{}x{}", self.output_dim(), x.ncols()),
                format!("{}x{}", cotangent.nrows(), cotangent.ncols()),
            ));
        }
        let trace = self.trace(x);
        let mut grad = ParamGradient::zeros_like(self);
        let mut ubar = cotangent.clone();
        for l in (0..self.layers.len()).rev() {
            let h = &trace.inputs[l];
            grad.layers[l].weight = &ubar * h.transpose();
            grad.layers[l].bias = ubar.column_sum();
            let hbar = self.layers[l].weight.tr_mul(&ubar);
            if l == 0 {
                return Ok((hbar, grad));
            }
            ubar = hbar.component_mul(&h.map(dtanh));
        }
        unreachable!("network has at least one layer")
    }

    /// `J(x) v` by forward-mode propagation.
    pub fn jvp(&self, x: &DVector<f64>, tangent: &DVector<f64>) -> Result<DVector<f64>> {
        if tangent.len() != x.len() {
            return Err(Error::shape("jvp tangent", x.len(), tangent.len()));
        }
        let (_, t) = self.jvp_batch(
            &DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
            &DMatrix::from_column_slice(tangent.len(), 1, tangent.as_slice()),
            1,
        )?;
        Ok(t.column(0).into_owned())
    }

    fn check_tangents(
        &self,
        x: &DMatrix<f64>,
        tangents: &DMatrix<f64>,
        per_point: usize,
    ) -> Result<()> {
        self.check_input(x.nrows())?;
        if per_point == 0
            || tangents.nrows() != x.nrows()
            || tangents.ncols() != x.ncols() * per_point
        {
            return Err(Error::shape(
                "jvp tangents",
                format!("{}x{}", x.nrows(), x.ncols() * per_point.max(1)),
                format!("{}x{}", tangents.nrows(), tangents.ncols()),
            ));
        }
        Ok(())
    }

    /// Outputs `f(x_p)` and tangent outputs `J(x_p) v` for `per_point`
    /// consecutive tangent columns per point.
    pub fn jvp_batch(
        &self,
        x: &DMatrix<f64>,
        tangents: &DMatrix<f64>,
        per_point: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_tangents(x, tangents, per_point)?;
        let dual = self.dual_trace(x, tangents, per_point);
        Ok((dual.primal.output, dual.tangent_output))
    }

    /// Jacobian `∂f/∂x` at one point, assembled from one JVP per input axis.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let eye = DMatrix::identity(x.len(), x.len());
        let (_, j) = self.jvp_batch(
            &DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
            &eye,
            x.len(),
        )?;
        Ok(j)
    }

    /// Parameter gradient of `Σ_c ⟨C_c, J(x_{p(c)}) v_c⟩`, i.e. of a scalar
    /// whose sensitivity to each tangent output column is `C_c`.
    ///
    /// Runs the dual pass forward, then one reverse sweep that carries
    /// adjoints for both the primal and the tangent activations.
    pub fn jvp_param_gradient(
        &self,
        x: &DMatrix<f64>,
        tangents: &DMatrix<f64>,
        per_point: usize,
        tangent_cotangent: &DMatrix<f64>,
    ) -> Result<ParamGradient> {
        self.check_tangents(x, tangents, per_point)?;
        if tangent_cotangent.shape() != (self.output_dim(), tangents.ncols()) {
            return Err(Error::shape(
                "tangent cotangent",
                format!("{}x{}", self.output_dim(), tangents.ncols()),
                format!(
                    "{}x{}",
                    tangent_cotangent.nrows(),
                    tangent_cotangent.ncols()
                ),
            ));
        }
        let dual = self.dual_trace(x, tangents, per_point);
        let mut grad = ParamGradient::zeros_like(self);
        // adjoints of u_l (primal) and u̇_l (tangent) at the current layer
        let mut ubar = DMatrix::zeros(self.output_dim(), x.ncols());
        let mut udotbar = tangent_cotangent.clone();
        for l in (0..self.layers.len()).rev() {
            let h = &dual.primal.inputs[l];
            let hdot = &dual.tangents[l];
            let layer = &self.layers[l];
            grad.layers[l].weight = &udotbar * hdot.transpose() + &ubar * h.transpose();
            grad.layers[l].bias = ubar.column_sum();
            if l == 0 {
                break;
            }
            let hdotbar = layer.weight.tr_mul(&udotbar);
            let hbar = layer.weight.tr_mul(&ubar);
            // ḣ = tanh'(u) ⊙ u̇ and h = tanh(u), with t = tanh(u) stored in `h`
            let mut next_udotbar = hdotbar.clone();
            broadcast_mul(&mut next_udotbar, h, per_point, dtanh);
            let mut next_ubar = hbar.component_mul(&h.map(dtanh));
            let udot_prev = &dual.tangent_pre[l - 1];
            for (c, col) in hdotbar.column_iter().enumerate() {
                let p = c / per_point;
                let t = h.column(p);
                let ud = udot_prev.column(c);
                let mut target = next_ubar.column_mut(p);
                for r in 0..col.len() {
                    target[r] += d2tanh(t[r]) * ud[r] * col[r];
                }
            }
            ubar = next_ubar;
            udotbar = next_udotbar;
        }
        Ok(grad)
    }
}

impl ParamGradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        ParamGradient {
            layers: net.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * scale;
            a.bias.axpy(scale, &b.bias, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

/// Row-major serialized network: sizes plus per-layer weight and bias arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpRepr {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for MlpRepr {
    fn from(net: &Mlp) -> Self {
        MlpRepr {
            sizes: net.sizes(),
            weights: net
                .layers
                .iter()
                .map(|l| l.weight.transpose().as_slice().to_vec())
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| l.bias.as_slice().to_vec())
                .collect(),
        }
    }
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        if r.sizes.len() < 2
            || r.weights.len() != r.sizes.len() - 1
            || r.biases.len() != r.weights.len()
        {
            return Err(Error::invalid(
                "network checkpoint",
                "layer count does not match sizes",
            ));
        }
        let mut layers = Vec::with_capacity(r.weights.len());
        for (l, (w, b)) in r.weights.iter().zip(&r.biases).enumerate() {
            let (rows, cols) = (r.sizes[l + 1], r.sizes[l]);
            if w.len() != rows * cols || b.len() != rows {
                return Err(Error::invalid(
                    "network checkpoint",
                    format!("layer {l} arrays do not match {rows}x{cols}"),
                ));
            }
            layers.push(Dense {
                weight: DMatrix::from_row_slice(rows, cols, w),
                bias: DVector::from_column_slice(b),
            });
        }
        Mlp::from_layers(layers)
    }
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MlpRepr::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Mlp::try_from(MlpRepr::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Adaptive-moment (Adam) optimizer state over a list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update over congruent `params` / `grads` blocks. Nothing is
    /// modified if any gradient entry is non-finite.
    pub fn step_blocks(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        block_name: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer blocks", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("optimizer block", p.len(), g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: block_name(i),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::invalid(
                "optimizer",
                "parameter blocks changed shape between steps",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[b];
            let v = &mut self.second[b];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp, grad: &ParamGradient) -> Result<()> {
        if grad.layers.len() != net.layers.len() {
            return Err(Error::shape(
                "gradient layers",
                net.layers.len(),
                grad.layers.len(),
            ));
        }
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(2 * net.layers.len());
        for l in &mut net.layers {
            params.push(l.weight.as_mut_slice());
            params.push(l.bias.as_mut_slice());
        }
        let grads: Vec<&[f64]> = grad
            .layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect();
        self.step_blocks(&mut params, &grads, |i| {
            format!(
                "layer {} {}",
                i / 2,
                if i % 2 == 0 { "weight" } else { "bias" }
            )
        })
    }
}
