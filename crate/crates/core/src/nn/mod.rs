//! Feedforward networks with a layer-wise backward pass.
//!
//! Every `Linear` layer forms one clipping group holding its weight and bias
//! jointly. Groups are numbered `0..K` from input to output; the backward pass
//! visits them in decreasing order.

mod backprop;
mod loss;

pub use backprop::{backward_layers, backward_per_layer, forward, forward_layers, LayerTape};
pub use loss::{loss, LossKind, Targets};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Tensor,
    /// `(out,)`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || bias.len() != weight.shape()[0] {
            return Err(Error::dim(
                "linear layer",
                format!(
                    "weight {:?} inconsistent with bias {:?}",
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        Ok(Linear { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Parameter count `d_k` (weight and bias).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Activation(Activation),
}

/// Layer widths and initialization of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// `[in, hidden.., out]`; one Linear layer per consecutive pair.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Per-Linear-layer weight std multiplier on top of `1/sqrt(fan_in)`.
    /// Empty means 1.0 everywhere.
    pub init_gains: Vec<f64>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        MlpSpec {
            widths,
            activation,
            init_gains: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    /// Layer index of each group's Linear layer.
    groups: Vec<usize>,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let groups: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Linear(_)).then_some(i))
            .collect();
        if groups.is_empty() {
            return Err(Error::Input("model needs at least one Linear layer".into()));
        }
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Linear(lin) = layer {
                if let Some(w) = width {
                    if w != lin.in_features() {
                        return Err(Error::dim(
                            format!("layer {i}"),
                            format!(
                                "expects {} inputs, previous layer emits {w}",
                                lin.in_features()
                            ),
                        ));
                    }
                }
                width = Some(lin.out_features());
            }
        }
        Ok(Model { layers, groups })
    }

    pub fn mlp<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(Error::Input(format!(
                "MLP widths must list at least input and output, all positive: {:?}",
                spec.widths
            )));
        }
        let n_linear = spec.widths.len() - 1;
        if !spec.init_gains.is_empty() && spec.init_gains.len() != n_linear {
            return Err(Error::Input(format!(
                "{} init gains given for {n_linear} Linear layers",
                spec.init_gains.len()
            )));
        }
        let mut layers = Vec::new();
        for (k, pair) in spec.widths.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let gain = spec.init_gains.get(k).copied().unwrap_or(1.0);
            let std = gain / (inp as f64).sqrt();
            let normal =
                Normal::new(0.0, std).map_err(|e| Error::Input(format!("init std {std}: {e}")))?;
            let w: Vec<f64> = (0..inp * out).map(|_| normal.sample(rng)).collect();
            layers.push(Layer::Linear(Linear::new(
                Tensor::new(vec![out, inp], w)?,
                Tensor::zeros(&[out]),
            )?));
            if k + 1 < n_linear {
                layers.push(Layer::Activation(spec.activation));
            }
        }
        Model::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Layer index hosting group `k`.
    pub fn group_layer(&self, k: usize) -> usize {
        self.groups[k]
    }

    pub fn linear(&self, k: usize) -> &Linear {
        match &self.layers[self.groups[k]] {
            Layer::Linear(l) => l,
            Layer::Activation(_) => unreachable!("group index always points at a Linear layer"),
        }
    }

    pub fn linear_mut(&mut self, k: usize) -> &mut Linear {
        match &mut self.layers[self.groups[k]] {
            Layer::Linear(l) => l,
            Layer::Activation(_) => unreachable!("group index always points at a Linear layer"),
        }
    }

    /// `d_k` for every group.
    pub fn group_sizes(&self) -> Vec<usize> {
        (0..self.num_groups())
            .map(|k| self.linear(k).param_count())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.group_sizes().iter().sum()
    }

    pub fn input_width(&self) -> usize {
        self.linear(0).in_features()
    }

    pub fn output_width(&self) -> usize {
        self.linear(self.num_groups() - 1).out_features()
    }

    /// All parameters concatenated in group order, weight before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for k in 0..self.num_groups() {
            let lin = self.linear(k);
            out.extend_from_slice(lin.weight.data());
            out.extend_from_slice(lin.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(
                "set_flat_params",
                format!(
                    "expected {} values, got {}",
                    self.param_count(),
                    params.len()
                ),
            ));
        }
        let mut offset = 0;
        for k in 0..self.num_groups() {
            let lin = self.linear_mut(k);
            let nw = lin.weight.len();
            lin.weight
                .data_mut()
                .copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = lin.bias.len();
            lin.bias
                .data_mut()
                .copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// `theta_k += alpha * delta`, with `delta` laid out weight then bias.
    pub fn apply_group_delta(&mut self, k: usize, delta: &[f64], alpha: f64) {
        let lin = self.linear_mut(k);
        let nw = lin.weight.len();
        for (p, d) in lin.weight.data_mut().iter_mut().zip(&delta[..nw]) {
            *p += alpha * d;
        }
        for (p, d) in lin.bias.data_mut().iter_mut().zip(&delta[nw..]) {
            *p += alpha * d;
        }
    }

    /// Splits the model into consecutive chunks by layer ranges.
    pub fn layer_chunk(&self, range: std::ops::Range<usize>) -> &[Layer] {
        &self.layers[range]
    }
}
