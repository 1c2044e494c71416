use std::cell::RefCell;

use super::meter::{BufferKind, Tracked};
use super::{clip_scale, collect_output_grads, ClipPolicy, GroupGradState, NO_CLIP};
use crate::error::{Error, Result};
use crate::nn::{forward, loss, LossKind, Model, Targets};
use crate::quantile::count_below;
use crate::tensor::Tensor;

thread_local! {
    // Reused across calls: a fresh multi-gigabyte buffer per step would mostly
    // measure page faults. Freed when the thread exits or on request.
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Frees this thread's per-example gradient buffer.
pub fn release_scratch() {
    SCRATCH.with(|s| *s.borrow_mut() = Vec::new());
}

/// Clips by materializing every per-example gradient.
///
/// `pairs[k]` is group `k`'s `(a, e)`; `clip_groups` partitions the group
/// indices into jointly clipped sets with one threshold each. A single set
/// holding every group is flat clipping, singletons are per-layer clipping.
///
/// Allocates a `B x sum_k d_k` buffer.
pub fn naive_clip_pairs(
    pairs: &[(&Tensor, &Tensor)],
    clip_groups: &[Vec<usize>],
    thresholds: &[f64],
) -> Result<Vec<GroupGradState>> {
    if clip_groups.len() != thresholds.len() {
        return Err(Error::Input(format!(
            "{} clip groups with {} thresholds",
            clip_groups.len(),
            thresholds.len()
        )));
    }
    let mut covered = vec![false; pairs.len()];
    for &g in clip_groups.iter().flatten() {
        if g >= pairs.len() || std::mem::replace(&mut covered[g], true) {
            return Err(Error::Input(format!(
                "clip groups must partition 0..{}",
                pairs.len()
            )));
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::Input("clip groups leave a layer uncovered".into()));
    }
    let batch = pairs[0].0.batch();
    let sizes: Vec<usize> = pairs
        .iter()
        .map(|(a, e)| e.width() * a.width() + e.width())
        .collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let d: usize = sizes.iter().sum();

    let _materialized = Tracked::new(BufferKind::ParamGrad, batch * d);
    let mut per_example = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    per_example.clear();
    per_example.resize(batch * d, 0.0);
    for (k, (a, e)) in pairs.iter().enumerate() {
        let (inp, out) = (a.width(), e.width());
        let t = a.rows_per_example();
        for i in 0..batch {
            let g = &mut per_example[i * d + offsets[k]..i * d + offsets[k] + sizes[k]];
            let (ai, ei) = (a.example(i), e.example(i));
            for r in 0..t {
                let ar = &ai[r * inp..(r + 1) * inp];
                for o in 0..out {
                    let ev = ei[r * out + o];
                    let row = &mut g[o * inp..(o + 1) * inp];
                    for (w, &x) in row.iter_mut().zip(ar) {
                        *w += ev * x;
                    }
                    g[out * inp + o] += ev;
                }
            }
        }
    }

    let group_norms: Vec<Vec<f64>> = (0..pairs.len())
        .map(|k| {
            (0..batch)
                .map(|i| {
                    let g = &per_example[i * d + offsets[k]..i * d + offsets[k] + sizes[k]];
                    g.iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect();

    let mut scales = vec![vec![1.0; batch]; pairs.len()];
    let mut unclipped = vec![0; pairs.len()];
    for (members, &c) in clip_groups.iter().zip(thresholds) {
        let joint: Vec<f64> = (0..batch)
            .map(|i| {
                members
                    .iter()
                    .map(|&k| group_norms[k][i] * group_norms[k][i])
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let count = count_below(&joint, c);
        for &k in members {
            scales[k] = joint.iter().map(|&n| clip_scale(n, c)).collect();
            unclipped[k] = count;
        }
    }

    let mut out = Vec::with_capacity(pairs.len());
    for (k, (a, e)) in pairs.iter().enumerate() {
        let guard = Tracked::new(BufferKind::ParamGrad, sizes[k]);
        let mut sum = vec![0.0; sizes[k]];
        for i in 0..batch {
            let g = &per_example[i * d + offsets[k]..i * d + offsets[k] + sizes[k]];
            let s = scales[k][i];
            for (acc, v) in sum.iter_mut().zip(g) {
                *acc += s * v;
            }
        }
        let nw = e.width() * a.width();
        let bias = sum.split_off(nw);
        out.push(GroupGradState::new(
            Tensor::new(vec![e.width(), a.width()], sum)?,
            Tensor::new(vec![e.width()], bias)?,
            group_norms[k].clone(),
            unclipped[k],
            Some(guard),
        ));
    }
    SCRATCH.with(|s| *s.borrow_mut() = per_example);
    Ok(out)
}

/// Naive clipping for arbitrary unions of Linear layers; see [`naive_clip_pairs`].
pub fn naive_oracle_grouped(
    model: &Model,
    x: &Tensor,
    targets: &Targets,
    kind: LossKind,
    clip_groups: &[Vec<usize>],
    thresholds: &[f64],
) -> Result<Vec<GroupGradState>> {
    let (logits, tape) = forward(model, x)?;
    let (_, dlogits) = loss(&logits, targets, kind)?;
    let es = collect_output_grads(model, &tape, &dlogits)?;
    let pairs: Vec<(&Tensor, &Tensor)> = es
        .iter()
        .enumerate()
        .map(|(k, (e, _))| (tape.input(model.group_layer(k)), e))
        .collect();
    naive_clip_pairs(&pairs, clip_groups, thresholds)
}

/// Reference clipped sums for `policy` (adaptive policies use their initial
/// thresholds).
pub fn naive_oracle(
    model: &Model,
    x: &Tensor,
    targets: &Targets,
    kind: LossKind,
    policy: &ClipPolicy,
) -> Result<Vec<GroupGradState>> {
    let k = model.num_groups();
    let (groups, thresholds): (Vec<Vec<usize>>, Vec<f64>) = match policy {
        ClipPolicy::NonPrivate => ((0..k).map(|g| vec![g]).collect(), vec![NO_CLIP; k]),
        ClipPolicy::Flat(c) => (vec![(0..k).collect()], vec![*c]),
        ClipPolicy::FixedPerLayer(c) => ((0..k).map(|g| vec![g]).collect(), c.clone()),
        ClipPolicy::AdaptivePerLayer(a) => ((0..k).map(|g| vec![g]).collect(), a.initial.clone()),
    };
    naive_oracle_grouped(model, x, targets, kind, &groups, &thresholds)
}
