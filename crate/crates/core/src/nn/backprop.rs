use super::{Layer, Model};
use crate::error::{Error, Result};
use crate::tensor::{matmul_ew, matmul_xwt, Tensor};

/// Inputs of every layer recorded by a forward pass.
///
/// For Linear layer `l`, `input(l)` is the activation `a` whose pairing with
/// the layer's output gradient `e` determines the per-example gradients.
#[derive(Clone, Debug)]
pub struct LayerTape {
    inputs: Vec<Tensor>,
}

impl LayerTape {
    pub fn input(&self, layer: usize) -> &Tensor {
        &self.inputs[layer]
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn batch(&self) -> usize {
        self.inputs[0].batch()
    }

    pub fn into_inputs(self) -> Vec<Tensor> {
        self.inputs
    }
}

fn with_width(shape: &[usize], width: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("nonempty shape") = width;
    s
}

fn linear_forward(lin: &super::Linear, x: &Tensor, layer: usize) -> Result<Tensor> {
    let (inp, out) = (lin.in_features(), lin.out_features());
    if x.ndim() < 2 || x.width() != inp {
        return Err(Error::dim(
            format!("layer {layer} (Linear {inp}->{out})"),
            format!("input shape {:?}", x.shape()),
        ));
    }
    let rows = x.rows();
    let mut y = matmul_xwt(x.data(), rows, lin.weight.data(), out, inp);
    let b = lin.bias.data();
    for row in y.chunks_mut(out) {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
    Tensor::new(with_width(x.shape(), out), y)
}

/// Runs a consecutive run of layers, returning the output and each layer's input.
pub fn forward_layers(layers: &[Layer], x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let next = match layer {
            Layer::Linear(lin) => linear_forward(lin, &cur, l)?,
            Layer::Activation(act) => {
                let mut y = cur.clone();
                y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
                y
            }
        };
        inputs.push(cur);
        cur = next;
    }
    Ok((cur, inputs))
}

pub fn forward(model: &Model, x: &Tensor) -> Result<(Tensor, LayerTape)> {
    let (logits, inputs) = forward_layers(model.layers(), x)?;
    Ok((logits, LayerTape { inputs }))
}

/// Backpropagates `grad_out` through `layers`, calling `visitor(k, a_k, e_k)`
/// for every Linear layer from last to first as soon as its output gradient is
/// known. Groups are numbered starting at `first_group`.
///
/// Returns the gradient with respect to the layers' input when
/// `need_input_grad` is set; otherwise propagation stops after the first
/// Linear layer has been visited.
pub fn backward_layers<F>(
    layers: &[Layer],
    inputs: &[Tensor],
    grad_out: Tensor,
    first_group: usize,
    need_input_grad: bool,
    mut visitor: F,
) -> Result<Option<Tensor>>
where
    F: FnMut(usize, &Tensor, &Tensor) -> Result<()>,
{
    if inputs.len() != layers.len() {
        return Err(Error::State(format!(
            "tape holds {} layer inputs for {} layers",
            inputs.len(),
            layers.len()
        )));
    }
    if let Some(first) = inputs.first() {
        if first.batch() != grad_out.batch() {
            return Err(Error::State(format!(
                "tape batch {} does not match output-gradient batch {}",
                first.batch(),
                grad_out.batch()
            )));
        }
    }
    let first_linear = layers.iter().position(|l| matches!(l, Layer::Linear(_)));
    let mut group = first_group
        + layers
            .iter()
            .filter(|l| matches!(l, Layer::Linear(_)))
            .count();
    let mut grad = grad_out;
    for l in (0..layers.len()).rev() {
        let a = &inputs[l];
        match &layers[l] {
            Layer::Linear(lin) => {
                group -= 1;
                if grad.rows() != a.rows() || grad.width() != lin.out_features() {
                    return Err(Error::State(format!(
                        "output gradient {:?} inconsistent with layer {l} input {:?}",
                        grad.shape(),
                        a.shape()
                    )));
                }
                visitor(group, a, &grad)?;
                if Some(l) == first_linear && !need_input_grad {
                    return Ok(None);
                }
                let g = matmul_ew(
                    grad.data(),
                    grad.rows(),
                    lin.weight.data(),
                    lin.out_features(),
                    lin.in_features(),
                );
                grad = Tensor::new(a.shape().to_vec(), g)?;
            }
            Layer::Activation(act) => {
                for (g, &x) in grad.data_mut().iter_mut().zip(a.data()) {
                    *g *= act.derivative(x);
                }
            }
        }
    }
    Ok(need_input_grad.then_some(grad))
}

/// Layer-wise backward pass over the whole model; see [`backward_layers`].
pub fn backward_per_layer<F>(
    model: &Model,
    tape: &LayerTape,
    dlogits: &Tensor,
    visitor: F,
) -> Result<()>
where
    F: FnMut(usize, &Tensor, &Tensor) -> Result<()>,
{
    backward_layers(
        model.layers(),
        &tape.inputs,
        dlogits.clone(),
        0,
        false,
        visitor,
    )?;
    Ok(())
}
