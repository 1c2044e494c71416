use std::borrow::Cow;

use super::meter::{BufferKind, Tracked};
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_eta_acc, Tensor};

fn check_pair(context: &str, a: &Tensor, e: &Tensor) -> Result<()> {
    if a.ndim() != e.ndim() || a.ndim() < 2 || a.batch() != e.batch() || a.rows() != e.rows() {
        return Err(Error::dim(
            context,
            format!(
                "activations {:?} vs output gradients {:?}",
                a.shape(),
                e.shape()
            ),
        ));
    }
    Ok(())
}

/// Squared norms of each example's Linear-layer gradient (weight and bias
/// together), computed from activations `a` and output gradients `e` without
/// forming the gradient.
///
/// For 2-D batches the weight part factorizes as `|a_i|^2 |e_i|^2`. For
/// `(B, T, .)` batches it is the Frobenius product of the two `T x T` Gram
/// matrices, and the bias part is `|sum_t e_it|^2`.
pub fn ghost_norms(a: &Tensor, e: &Tensor) -> Result<Vec<f64>> {
    check_pair("ghost_norms", a, e)?;
    let batch = a.batch();
    let t = a.rows_per_example();
    let (wa, we) = (a.width(), e.width());
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let ai = a.example(i);
        let ei = e.example(i);
        if t == 1 {
            let e2 = dot(ei, ei);
            out.push(dot(ai, ai) * e2 + e2);
            continue;
        }
        let mut w_norm = 0.0;
        for r in 0..t {
            let ar = &ai[r * wa..(r + 1) * wa];
            let er = &ei[r * we..(r + 1) * we];
            w_norm += dot(ar, ar) * dot(er, er);
            for s in 0..r {
                let as_ = &ai[s * wa..(s + 1) * wa];
                let es = &ei[s * we..(s + 1) * we];
                w_norm += 2.0 * dot(ar, as_) * dot(er, es);
            }
        }
        let mut bias = vec![0.0; we];
        for row in ei.chunks(we) {
            for (b, v) in bias.iter_mut().zip(row) {
                *b += v;
            }
        }
        out.push(w_norm + dot(&bias, &bias));
    }
    Ok(out)
}

/// `sum_i scales_i * g^(i)` as `(weight_grad (out, in), bias_grad (out,))`,
/// computed as one product of `a` with row-scaled `e`.
///
/// Only a row-scaled copy of `e` is allocated next to the two outputs.
pub fn fused_clipped_sum(a: &Tensor, e: &Tensor, scales: &[f64]) -> Result<(Tensor, Tensor)> {
    let (gw, gb, _guard) = fused_clipped_sum_tracked(a, e, scales)?;
    Ok((gw, gb))
}

pub(crate) fn fused_clipped_sum_tracked(
    a: &Tensor,
    e: &Tensor,
    scales: &[f64],
) -> Result<(Tensor, Tensor, Tracked)> {
    check_pair("fused_clipped_sum", a, e)?;
    if scales.len() != a.batch() {
        return Err(Error::dim(
            "fused_clipped_sum",
            format!("{} scales for batch of {}", scales.len(), a.batch()),
        ));
    }
    let (inp, out) = (a.width(), e.width());
    let rows = a.rows();
    let mut _scratch = None;
    let scaled: Cow<[f64]> = if scales.iter().all(|&s| s == 1.0) {
        Cow::Borrowed(e.data())
    } else {
        _scratch = Some(Tracked::new(BufferKind::ActivationGrad, e.len()));
        let mut scaled = e.data().to_vec();
        let n = e.example_len();
        for (i, &s) in scales.iter().enumerate() {
            scaled[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= s);
        }
        Cow::Owned(scaled)
    };
    let guard = Tracked::new(BufferKind::ParamGrad, out * inp + out);
    let mut gw = vec![0.0; out * inp];
    matmul_eta_acc(&scaled, a.data(), rows, out, inp, &mut gw);
    let mut gb = vec![0.0; out];
    for row in scaled.chunks(out) {
        for (b, v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok((
        Tensor::new(vec![out, inp], gw)?,
        Tensor::new(vec![out], gb)?,
        guard,
    ))
}
