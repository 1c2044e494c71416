#![allow(dead_code)]

use groupclip_core::nn::{Activation, LossKind, MlpSpec, Model, Targets};
use groupclip_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub model: Model,
    pub x: Tensor,
    pub targets: Targets,
    pub kind: LossKind,
}

pub fn gaussian<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// A random MLP with batch; `seq` gives a sequence axis of length 1..=3.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    max_depth: usize,
    max_width: usize,
    max_batch: usize,
    seq: bool,
) -> Instance {
    let depth = rng.random_range(1..=max_depth);
    let widths: Vec<usize> = (0..=depth)
        .map(|_| rng.random_range(2..=max_width))
        .collect();
    let mut spec = MlpSpec::new(
        widths.clone(),
        if rng.random_bool(0.5) {
            Activation::Relu
        } else {
            Activation::Tanh
        },
    );
    spec.init_gains = (0..depth).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut model = Model::mlp(&spec, rng).unwrap();
    // Nonzero biases keep ReLU pre-activations off the kink at exactly zero.
    let mut params = model.flat_params();
    let noise = gaussian(rng, params.len(), 0.1);
    params.iter_mut().zip(noise).for_each(|(p, n)| *p += n);
    model.set_flat_params(&params).unwrap();
    let b = rng.random_range(1..=max_batch);
    let t = if seq { rng.random_range(1..=3) } else { 1 };
    let shape = if seq {
        vec![b, t, widths[0]]
    } else {
        vec![b, widths[0]]
    };
    let x = Tensor::new(shape, gaussian(rng, b * t * widths[0], 1.0)).unwrap();
    let out = widths[depth];
    let (kind, targets) = if rng.random_bool(0.5) {
        let labels = (0..b * t).map(|_| rng.random_range(0..out)).collect();
        (LossKind::CrossEntropy, Targets::Classes(labels))
    } else {
        let shape = if seq { vec![b, t, out] } else { vec![b, out] };
        let v = Tensor::new(shape, gaussian(rng, b * t * out, 1.0)).unwrap();
        (LossKind::Mse, Targets::Values(v))
    };
    Instance {
        model,
        x,
        targets,
        kind,
    }
}

/// A threshold inside the spread of `norms`, so some examples clip and some
/// do not.
pub fn threshold_among<R: Rng>(rng: &mut R, norms: &[f64]) -> f64 {
    let mut s = norms.to_vec();
    s.sort_by(f64::total_cmp);
    let pick = s[rng.random_range(0..s.len())];
    (pick * rng.random_range(0.7..1.3)).max(1e-6)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
