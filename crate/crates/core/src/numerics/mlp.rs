//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters live in a single flat [`ParamVector`]. Layer `l` stores its
//! weight matrix row-major with shape `(out, in)` followed by its `out`
//! biases, and layers are laid out back to back.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Relu),
            other => Err(Error::Codec(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    /// One entry per hidden layer (`layer_dims.len() - 2` entries).
    pub hidden_activations: Vec<Activation>,
    pub output_activation: Activation,
}

impl MlpSpec {
    /// Spec with the same activation on every hidden layer.
    pub fn new(layer_dims: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let n_hidden = layer_dims.len().saturating_sub(2);
        let spec = Self {
            layer_dims,
            hidden_activations: vec![hidden; n_hidden],
            output_activation: output,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layer dims, got {}",
                self.layer_dims.len()
            )));
        }
        if let Some(pos) = self.layer_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!("layer dim {pos} is zero")));
        }
        if self.hidden_activations.len() != self.layer_dims.len() - 2 {
            return Err(Error::InvalidSpec(format!(
                "{} hidden activations for {} hidden layers",
                self.hidden_activations.len(),
                self.layer_dims.len() - 2
            )));
        }
        if matches!(self.output_activation, Activation::Relu) {
            return Err(Error::InvalidSpec("output activation must be identity or tanh".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// `(rows, cols)` of every weight matrix.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        self.layer_dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(r, c)| r * c + r).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activations[layer]
        }
    }
}

/// Flat parameter storage plus the layer layout it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self {
            values: vec![0.0; other.values.len()],
            layout: other.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn expected_len(layout: &[(usize, usize)]) -> usize {
        layout.iter().map(|(r, c)| r * c + r).sum()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("parameter vector", Self::expected_len(&self.layout), self.values.len())?;
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.layout == other.layout && self.values.len() == other.values.len()
    }

    /// Iterate `(weights, biases)` slices per layer.
    fn layers(&self) -> impl Iterator<Item = ((usize, usize), &[f64], &[f64])> {
        let mut offset = 0;
        self.layout.iter().map(move |&(rows, cols)| {
            let w = &self.values[offset..offset + rows * cols];
            let b = &self.values[offset + rows * cols..offset + rows * cols + rows];
            offset += rows * cols + rows;
            ((rows, cols), w, b)
        })
    }

    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer, zero biases.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = SimRng::seed_from(seed);
    let mut params = ParamVector::zeros(spec);
    let mut offset = 0;
    for (rows, cols) in spec.layout() {
        let limit = 1.0 / (cols as f64).sqrt();
        for w in &mut params.values[offset..offset + rows * cols] {
            *w = rng.uniform(-limit, limit);
        }
        offset += rows * cols + rows;
    }
    Ok(params)
}

/// Activations recorded during a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `outputs[0]` is the input; `outputs[l + 1]` is the output of layer `l`.
    outputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("tape has at least the input")
    }
}

fn check_params(params: &ParamVector, spec: &MlpSpec) -> Result<()> {
    if params.layout != spec.layout() {
        return Err(Error::InvalidSpec("parameter layout does not match spec".into()));
    }
    check_dim("parameter vector", spec.param_count(), params.values.len())
}

pub fn forward_tape(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Tape> {
    check_params(params, spec)?;
    check_dim("network input", spec.input_dim(), input.len())?;
    let mut outputs = Vec::with_capacity(spec.num_layers() + 1);
    let mut pre_activations = Vec::with_capacity(spec.num_layers());
    outputs.push(input.to_vec());
    for (l, ((rows, cols), w, b)) in params.layers().enumerate() {
        let act = spec.activation(l);
        let x = &outputs[l];
        let mut z = b.to_vec();
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            z[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let y = z.iter().map(|&v| act.apply(v)).collect();
        pre_activations.push(z);
        outputs.push(y);
    }
    Ok(Tape {
        outputs,
        pre_activations,
    })
}

pub fn mlp_forward(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    let mut tape = forward_tape(params, spec, input)?;
    Ok(tape.outputs.pop().expect("non-empty"))
}

/// Back-propagate `upstream` (dL/d output) through a recorded pass.
/// Parameter gradients are accumulated into `param_grad`; the gradient
/// with respect to the network input is returned.
pub fn backward(
    params: &ParamVector,
    spec: &MlpSpec,
    tape: &Tape,
    upstream: &[f64],
    param_grad: &mut ParamVector,
) -> Result<Vec<f64>> {
    check_dim("upstream gradient", spec.output_dim(), upstream.len())?;
    check_dim("gradient accumulator", params.len(), param_grad.len())?;
    let layers: Vec<_> = params.layers().map(|(shape, w, _)| (shape, w)).collect();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for &((rows, cols), _) in &layers {
        offsets.push(off);
        off += rows * cols + rows;
    }

    let mut delta: Vec<f64> = upstream.to_vec();
    for l in (0..layers.len()).rev() {
        let ((rows, cols), w) = layers[l];
        let act = spec.activation(l);
        let z = &tape.pre_activations[l];
        let y = &tape.outputs[l + 1];
        for r in 0..rows {
            delta[r] *= act.derivative(z[r], y[r]);
        }
        let x = &tape.outputs[l];
        let g = &mut param_grad.values[offsets[l]..offsets[l] + rows * cols + rows];
        let (gw, gb) = g.split_at_mut(rows * cols);
        let mut next = vec![0.0; cols];
        for r in 0..rows {
            let d = delta[r];
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            let row_g = &mut gw[r * cols..(r + 1) * cols];
            let row_w = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                row_g[c] += d * x[c];
                next[c] += d * row_w[c];
            }
        }
        delta = next;
    }
    Ok(delta)
}

/// Gradients of `upstream · output` with respect to parameters and input.
pub fn mlp_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    input: &[f64],
    upstream: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    let tape = forward_tape(params, spec, input)?;
    let mut grad = ParamVector::zeros_like(params);
    let input_grad = backward(params, spec, &tape, upstream, &mut grad)?;
    Ok((grad, input_grad))
}

/// A spec and its parameters travelling together.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        let params = mlp_init(&spec, seed)?;
        Ok(Self { spec, params })
    }

    pub fn zeroed(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = ParamVector::zeros(&spec);
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.params, &self.spec, input)
    }

    pub fn tape(&self, input: &[f64]) -> Result<Tape> {
        forward_tape(&self.params, &self.spec, input)
    }

    pub fn backward(&self, tape: &Tape, upstream: &[f64], acc: &mut ParamVector) -> Result<Vec<f64>> {
        backward(&self.params, &self.spec, tape, upstream, acc)
    }

    pub fn zero_grad(&self) -> ParamVector {
        ParamVector::zeros_like(&self.params)
    }
}
