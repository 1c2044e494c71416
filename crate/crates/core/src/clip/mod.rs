//! Per-example gradient clipping.
//!
//! Three routes produce the same clipped sums:
//!
//! * the fused per-layer route ([`clip_layer`], [`per_layer_clipped_grads`]),
//!   which clips each group inside the backward pass from ghost norms;
//! * the two-phase flat route ([`flat_two_phase`]), which caches every
//!   `(a, e)` pair, computes whole-model norms, then scales;
//! * the naive route ([`naive_oracle`]), which materializes all per-example
//!   gradients and is the reference for the other two.

mod ghost;
pub mod meter;
mod oracle;

pub use ghost::{fused_clipped_sum, ghost_norms};
pub use oracle::{naive_clip_pairs, naive_oracle, naive_oracle_grouped, release_scratch};

use crate::error::{Error, Result};
use crate::nn::{backward_per_layer, LayerTape, Model};
use crate::quantile::count_below;
use crate::tensor::Tensor;
use meter::{BufferKind, Tracked};

/// Threshold sentinel meaning "do not clip".
pub const NO_CLIP: f64 = f64::INFINITY;

/// One clipping group `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub index: usize,
    /// `d_k`
    pub size: usize,
    /// `C_k`; `+inf` disables clipping.
    pub threshold: f64,
    /// Noise allocation weight `gamma_k`.
    pub weight: f64,
}

impl ParamGroup {
    pub fn new(index: usize, size: usize, threshold: f64, weight: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Input(format!("group {index} has no parameters")));
        }
        if !(threshold > 0.0) {
            return Err(Error::Input(format!(
                "group {index} threshold must be positive, got {threshold}"
            )));
        }
        if !(weight > 0.0) {
            return Err(Error::Input(format!(
                "group {index} allocation weight must be positive, got {weight}"
            )));
        }
        Ok(ParamGroup {
            index,
            size,
            threshold,
            weight,
        })
    }

    /// Groups for `model` with the given thresholds and unit weights.
    pub fn for_model(model: &Model, thresholds: &[f64]) -> Result<Vec<ParamGroup>> {
        if thresholds.len() != model.num_groups() {
            return Err(Error::Input(format!(
                "{} thresholds for {} groups",
                thresholds.len(),
                model.num_groups()
            )));
        }
        model
            .group_sizes()
            .into_iter()
            .zip(thresholds)
            .enumerate()
            .map(|(k, (d, &c))| ParamGroup::new(k, d, c, 1.0))
            .collect()
    }
}

/// Settings for per-layer thresholds that track a gradient-norm quantile.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveClipping {
    /// Target fraction `q` of unclipped per-example group norms.
    pub target_quantile: f64,
    /// Quantile learning rate `eta`.
    pub quantile_lr: f64,
    /// Noise multiplier `sigma_b` for the released clip counts.
    pub count_noise: f64,
    pub initial: Vec<f64>,
    /// When set, each step clips at `C * C_k / |C|` so the thresholds in
    /// force always have joint norm `C`; the estimators keep tracking the
    /// raw quantiles.
    pub equivalent_global: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClipPolicy {
    /// Plain summed gradients: no clipping and no noise.
    NonPrivate,
    Flat(f64),
    FixedPerLayer(Vec<f64>),
    AdaptivePerLayer(AdaptiveClipping),
}

impl ClipPolicy {
    /// Fixed per-layer thresholds `C / sqrt(K)`, whose joint norm equals the
    /// flat threshold `C`.
    pub fn fixed_from_global(global: f64, groups: usize) -> ClipPolicy {
        ClipPolicy::FixedPerLayer(vec![global / (groups as f64).sqrt(); groups])
    }

    pub fn validate(&self, groups: usize) -> Result<()> {
        let check = |c: &[f64]| -> Result<()> {
            if c.len() != groups {
                return Err(Error::Config(format!(
                    "{} thresholds given for {groups} groups",
                    c.len()
                )));
            }
            if let Some(bad) = c.iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::Config(format!("threshold {bad} is not positive")));
            }
            Ok(())
        };
        match self {
            ClipPolicy::NonPrivate => Ok(()),
            ClipPolicy::Flat(c) if *c > 0.0 => Ok(()),
            ClipPolicy::Flat(c) => {
                Err(Error::Config(format!("flat threshold {c} is not positive")))
            }
            ClipPolicy::FixedPerLayer(c) => check(c),
            ClipPolicy::AdaptivePerLayer(a) => {
                check(&a.initial)?;
                if !(a.target_quantile > 0.0 && a.target_quantile < 1.0) {
                    return Err(Error::Config(format!(
                        "target quantile {} outside (0, 1)",
                        a.target_quantile
                    )));
                }
                if !(a.quantile_lr > 0.0) {
                    return Err(Error::Config(
                        "quantile learning rate must be positive".into(),
                    ));
                }
                if a.count_noise < 0.0 {
                    return Err(Error::Config("count noise multiplier must be >= 0".into()));
                }
                if let Some(g) = a.equivalent_global {
                    if !(g > 0.0 && g.is_finite()) {
                        return Err(Error::Config(format!("equivalent global threshold {g}")));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, ClipPolicy::Flat(_))
    }
}

/// Clipped-sum accumulator and statistics for one group after a step.
#[derive(Clone, Debug)]
pub struct GroupGradState {
    /// `sum_i clipped g_k^(i)` for the weight, `(out, in)`.
    pub weight_grad: Tensor,
    /// Same for the bias, `(out,)`.
    pub bias_grad: Tensor,
    /// Unclipped per-example norms `|g_k^(i)|`.
    pub norms: Vec<f64>,
    /// Clip count `b_k`: examples whose norm did not exceed the threshold.
    pub unclipped: usize,
    _buffer: Option<Tracked>,
}

impl GroupGradState {
    pub(crate) fn new(
        weight_grad: Tensor,
        bias_grad: Tensor,
        norms: Vec<f64>,
        unclipped: usize,
        buffer: Option<Tracked>,
    ) -> Self {
        GroupGradState {
            weight_grad,
            bias_grad,
            norms,
            unclipped,
            _buffer: buffer,
        }
    }

    /// Weight then bias, matching [`Model::flat_params`] order.
    pub fn flat(&self) -> Vec<f64> {
        [self.weight_grad.data(), self.bias_grad.data()].concat()
    }

    pub fn len(&self) -> usize {
        self.weight_grad.len() + self.bias_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `min(1, C / norm)`, with scale 1 for a zero norm or an infinite threshold.
pub fn clip_scale(norm: f64, threshold: f64) -> f64 {
    if norm == 0.0 || threshold == f64::INFINITY {
        1.0
    } else {
        (threshold / norm).min(1.0)
    }
}

/// Rescales per-group thresholds so their joint norm equals `global`.
pub fn normalize_thresholds(thresholds: &[f64], global: f64) -> Result<Vec<f64>> {
    if thresholds.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Input(format!(
            "thresholds must be finite and nonnegative: {thresholds:?}"
        )));
    }
    let joint = thresholds.iter().map(|c| c * c).sum::<f64>().sqrt();
    if joint == 0.0 {
        return Err(Error::Input("cannot normalize all-zero thresholds".into()));
    }
    Ok(thresholds.iter().map(|c| global * c / joint).collect())
}

fn finite_norms(norms_sq: Vec<f64>, group: usize) -> Result<Vec<f64>> {
    if norms_sq.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite per-example gradient norm in group {group}"
        )));
    }
    Ok(norms_sq.into_iter().map(f64::sqrt).collect())
}

/// Ghost norms, fused clip-and-sum and clip count for one group.
pub fn clip_layer(group: usize, a: &Tensor, e: &Tensor, threshold: f64) -> Result<GroupGradState> {
    let norms = finite_norms(ghost_norms(a, e)?, group)?;
    let scales: Vec<f64> = norms.iter().map(|&n| clip_scale(n, threshold)).collect();
    let (gw, gb, guard) = ghost::fused_clipped_sum_tracked(a, e, &scales)?;
    let unclipped = count_below(&norms, threshold);
    Ok(GroupGradState::new(gw, gb, norms, unclipped, Some(guard)))
}

/// Fused per-layer clipping over a whole backward pass.
pub fn per_layer_clipped_grads(
    model: &Model,
    tape: &LayerTape,
    dlogits: &Tensor,
    thresholds: &[f64],
) -> Result<Vec<GroupGradState>> {
    if thresholds.len() != model.num_groups() {
        return Err(Error::Input(format!(
            "{} thresholds for {} groups",
            thresholds.len(),
            model.num_groups()
        )));
    }
    let mut states: Vec<Option<GroupGradState>> = vec![None; model.num_groups()];
    backward_per_layer(model, tape, dlogits, |k, a, e| {
        states[k] = Some(clip_layer(k, a, e, thresholds[k])?);
        Ok(())
    })?;
    collect_states(states)
}

fn collect_states(states: Vec<Option<GroupGradState>>) -> Result<Vec<GroupGradState>> {
    states
        .into_iter()
        .enumerate()
        .map(|(k, s)| s.ok_or_else(|| Error::State(format!("group {k} was never visited"))))
        .collect()
}

/// Ordinary summed gradients of every group, one product per layer.
pub fn plain_gradients(
    model: &Model,
    tape: &LayerTape,
    dlogits: &Tensor,
) -> Result<Vec<GroupGradState>> {
    let mut states: Vec<Option<GroupGradState>> = vec![None; model.num_groups()];
    backward_per_layer(model, tape, dlogits, |k, a, e| {
        let ones = vec![1.0; a.batch()];
        let (gw, gb, guard) = ghost::fused_clipped_sum_tracked(a, e, &ones)?;
        states[k] = Some(GroupGradState::new(
            gw,
            gb,
            Vec::new(),
            a.batch(),
            Some(guard),
        ));
        Ok(())
    })?;
    collect_states(states)
}

/// Clips the union of the given `(a, e)` pairs jointly at `threshold`: whole
/// union norms first, then one scale per example applied to every member.
pub fn two_phase_clip(pairs: &[(&Tensor, &Tensor)], threshold: f64) -> Result<Vec<GroupGradState>> {
    let mut per_group = Vec::with_capacity(pairs.len());
    for (g, (a, e)) in pairs.iter().enumerate() {
        per_group.push(finite_norms(ghost_norms(a, e)?, g)?);
    }
    let batch = per_group.first().map_or(0, Vec::len);
    let totals: Vec<f64> = (0..batch)
        .map(|i| per_group.iter().map(|n| n[i] * n[i]).sum::<f64>().sqrt())
        .collect();
    let scales: Vec<f64> = totals.iter().map(|&n| clip_scale(n, threshold)).collect();
    let unclipped = count_below(&totals, threshold);
    pairs
        .iter()
        .zip(per_group)
        .map(|((a, e), norms)| {
            let (gw, gb, guard) = ghost::fused_clipped_sum_tracked(a, e, &scales)?;
            Ok(GroupGradState::new(gw, gb, norms, unclipped, Some(guard)))
        })
        .collect()
}

/// Output gradients of every group from one backward pass, tracked as
/// activation-gradient scratch.
pub fn collect_output_grads(
    model: &Model,
    tape: &LayerTape,
    dlogits: &Tensor,
) -> Result<Vec<(Tensor, Tracked)>> {
    let mut es: Vec<Option<(Tensor, Tracked)>> = vec![None; model.num_groups()];
    backward_per_layer(model, tape, dlogits, |k, _a, e| {
        es[k] = Some((e.clone(), Tracked::new(BufferKind::ActivationGrad, e.len())));
        Ok(())
    })?;
    es.into_iter()
        .enumerate()
        .map(|(k, e)| e.ok_or_else(|| Error::State(format!("group {k} was never visited"))))
        .collect()
}

/// Flat clipping without materialization: a full backward pass caching every
/// `(a, e)` pair, whole-model norms, then a second scaling pass.
pub fn flat_two_phase(
    model: &Model,
    tape: &LayerTape,
    dlogits: &Tensor,
    threshold: f64,
) -> Result<Vec<GroupGradState>> {
    if tape.inputs().len() != model.layers().len() {
        return Err(Error::State(format!(
            "tape holds {} layer inputs, model has {} layers",
            tape.inputs().len(),
            model.layers().len()
        )));
    }
    let es = collect_output_grads(model, tape, dlogits)?;
    let pairs: Vec<(&Tensor, &Tensor)> = es
        .iter()
        .enumerate()
        .map(|(k, (e, _))| (tape.input(model.group_layer(k)), e))
        .collect();
    two_phase_clip(&pairs, threshold)
}
