use std::time::{Duration, Instant};

use super::{BatchSpec, Dataset, UpdateRule};
use crate::clip::{
    flat_two_phase, meter, naive_oracle_grouped, normalize_thresholds, per_layer_clipped_grads,
    plain_gradients, ClipPolicy, GroupGradState, ParamGroup, NO_CLIP,
};
use crate::error::{Error, Result};
use crate::nn::{forward, loss, Model};
use crate::privacy::{fill_gaussian, make_noise_plan, NoisePlan, NoiseStrategy};
use crate::quantile::{count_below, QuantileEstimator};
use crate::rng::RandomStreams;

/// How the clipped sums are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipBackend {
    /// Ghost norms and fused sums inside backpropagation (two-phase for flat).
    Fused,
    /// Materialize every per-example gradient.
    Naive,
}

/// Threshold state carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipState {
    NonPrivate,
    Flat(f64),
    Fixed(Vec<f64>),
    Adaptive {
        estimators: Vec<QuantileEstimator>,
        equivalent_global: Option<f64>,
    },
}

impl ClipState {
    pub fn from_policy(policy: &ClipPolicy, groups: usize, nominal_batch: usize) -> Result<Self> {
        policy.validate(groups)?;
        Ok(match policy {
            ClipPolicy::NonPrivate => ClipState::NonPrivate,
            ClipPolicy::Flat(c) => ClipState::Flat(*c),
            ClipPolicy::FixedPerLayer(c) => ClipState::Fixed(c.clone()),
            ClipPolicy::AdaptivePerLayer(a) => ClipState::Adaptive {
                estimators: a
                    .initial
                    .iter()
                    .map(|&c| {
                        QuantileEstimator::new(
                            c,
                            a.target_quantile,
                            a.quantile_lr,
                            a.count_noise,
                            nominal_batch,
                        )
                    })
                    .collect::<Result<_>>()?,
                equivalent_global: a.equivalent_global,
            },
        })
    }

    /// Per-group thresholds clipping uses this step (the flat threshold is
    /// repeated for every group).
    pub fn active_thresholds(&self, groups: usize) -> Result<Vec<f64>> {
        Ok(match self {
            ClipState::NonPrivate => vec![NO_CLIP; groups],
            ClipState::Flat(c) => vec![*c; groups],
            ClipState::Fixed(c) => c.clone(),
            ClipState::Adaptive {
                estimators,
                equivalent_global,
            } => {
                let raw: Vec<f64> = estimators.iter().map(|e| e.threshold()).collect();
                match equivalent_global {
                    Some(g) => normalize_thresholds(&raw, *g)?,
                    None => raw,
                }
            }
        })
    }
}

/// Optimizer moments over the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Moments {
    None,
    Momentum(Vec<f64>),
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Moments {
    fn for_rule(rule: &UpdateRule, params: usize) -> Moments {
        match *rule {
            UpdateRule::Sgd { momentum: 0.0 } => Moments::None,
            UpdateRule::Sgd { .. } => Moments::Momentum(vec![0.0; params]),
            UpdateRule::Adam { .. } => Moments::Adam {
                m: vec![0.0; params],
                v: vec![0.0; params],
                t: 0,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub clip: ClipState,
    pub moments: Moments,
    /// Steps taken so far.
    pub step: u64,
    pub streams: RandomStreams,
}

impl TrainState {
    pub fn new(
        model: Model,
        policy: &ClipPolicy,
        rule: &UpdateRule,
        nominal_batch: usize,
        seed: u64,
    ) -> Result<Self> {
        let clip = ClipState::from_policy(policy, model.num_groups(), nominal_batch)?;
        let moments = Moments::for_rule(rule, model.param_count());
        Ok(TrainState {
            model,
            clip,
            moments,
            step: 0,
            streams: RandomStreams::new(seed),
        })
    }
}

/// Everything one step needs besides the state and the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub rule: UpdateRule,
    pub lr: f64,
    pub strategy: NoiseStrategy,
    /// Gradient noise multiplier (`sigma_new` when clip counts are released).
    pub noise_multiplier: f64,
    pub batch: BatchSpec,
    pub backend: ClipBackend,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Index of the step just taken.
    pub step: u64,
    pub batch_size: usize,
    /// Mean per-example loss on the batch (0 for an empty batch).
    pub loss: f64,
    /// Thresholds in force during the step.
    pub thresholds: Vec<f64>,
    /// Examples per group at or below the threshold (jointly for flat).
    pub unclipped: Vec<usize>,
    pub noise_stds: Vec<f64>,
    /// Per-example norms by group; empty for non-private steps.
    pub norms: Vec<Vec<f64>>,
    pub peak_grad_bytes: usize,
    /// Wall time of the backward-and-clip region.
    pub clip_time: Duration,
}

impl StepReport {
    pub fn clipped_fraction(&self, group: usize) -> f64 {
        if self.batch_size == 0 {
            0.0
        } else {
            1.0 - self.unclipped[group] as f64 / self.batch_size as f64
        }
    }
}

fn noise_plan(state: &TrainState, thresholds: &[f64], cfg: &StepConfig) -> Result<NoisePlan> {
    let model = &state.model;
    let sizes = model.group_sizes();
    match &state.clip {
        ClipState::NonPrivate => NoisePlan::flat(NO_CLIP, &sizes, 0.0),
        ClipState::Flat(c) => NoisePlan::flat(*c, &sizes, cfg.noise_multiplier),
        _ => {
            let groups = ParamGroup::for_model(model, thresholds)?;
            make_noise_plan(cfg.strategy, &groups, cfg.noise_multiplier)
        }
    }
}

fn clipped_sums(
    state: &TrainState,
    data: &Dataset,
    indices: &[usize],
    thresholds: &[f64],
    backend: ClipBackend,
) -> Result<(f64, Vec<GroupGradState>, Duration)> {
    let model = &state.model;
    let k = model.num_groups();
    let (x, t) = data.batch(indices)?;
    let (logits, tape) = forward(model, &x)?;
    let (loss_value, dlogits) = loss(&logits, &t, data.kind)?;
    let start = Instant::now();
    let states = match (backend, &state.clip) {
        (ClipBackend::Fused, ClipState::NonPrivate) => plain_gradients(model, &tape, &dlogits)?,
        (ClipBackend::Fused, ClipState::Flat(c)) => flat_two_phase(model, &tape, &dlogits, *c)?,
        (ClipBackend::Fused, _) => per_layer_clipped_grads(model, &tape, &dlogits, thresholds)?,
        (ClipBackend::Naive, ClipState::Flat(c)) => {
            naive_oracle_grouped(model, &x, &t, data.kind, &[(0..k).collect()], &[*c])?
        }
        (ClipBackend::Naive, _) => {
            let singletons: Vec<Vec<usize>> = (0..k).map(|g| vec![g]).collect();
            naive_oracle_grouped(model, &x, &t, data.kind, &singletons, thresholds)?
        }
    };
    Ok((loss_value, states, start.elapsed()))
}

/// One step of private training on the examples `indices` of `data`.
///
/// Clips per the state's thresholds, adds noise from the per-`(step, group)`
/// gradient streams, updates with `(sum + noise) / B` for the nominal `B`,
/// then moves adaptive thresholds using one count-noise draw per group in
/// group order.
pub fn dp_step(
    state: &mut TrainState,
    data: &Dataset,
    indices: &[usize],
    cfg: &StepConfig,
) -> Result<StepReport> {
    let groups = state.model.num_groups();
    let sizes = state.model.group_sizes();
    let nominal = cfg.batch.nominal(data.len()) as f64;
    let thresholds = state.clip.active_thresholds(groups)?;

    meter::reset_peaks();
    let (loss_value, states, clip_time) = if indices.is_empty() {
        if matches!(cfg.batch, BatchSpec::Fixed(_)) {
            return Err(Error::State("fixed-size batch came out empty".into()));
        }
        (0.0, Vec::new(), Duration::ZERO)
    } else {
        clipped_sums(state, data, indices, &thresholds, cfg.backend)?
    };
    let peak_grad_bytes = meter::reading().param_grad_peak;

    let unclipped: Vec<usize> = match &state.clip {
        _ if states.is_empty() => vec![0; groups],
        ClipState::Adaptive { estimators, .. } => states
            .iter()
            .zip(estimators)
            .map(|(s, e)| count_below(&s.norms, e.threshold()))
            .collect(),
        _ => states.iter().map(|s| s.unclipped).collect(),
    };

    let plan = noise_plan(state, &thresholds, cfg)?;
    let private = !matches!(state.clip, ClipState::NonPrivate);

    let mut updates: Vec<Vec<f64>> = Vec::with_capacity(groups);
    for k in 0..groups {
        let mut g = match states.get(k) {
            Some(s) => s.flat(),
            None => vec![0.0; sizes[k]],
        };
        if plan.stds[k] != 0.0 {
            let mut z = vec![0.0; sizes[k]];
            let mut rng = state.streams.gradient_rng(state.step, k);
            fill_gaussian(&mut rng, plan.stds[k], &mut z);
            g.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
        }
        g.iter_mut().for_each(|v| *v /= nominal);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in group {k}")));
        }
        updates.push(g);
    }
    if private {
        state.streams.note_gradient_draw();
    }
    apply_update(state, &updates, cfg)?;

    if let ClipState::Adaptive { estimators, .. } = &mut state.clip {
        for (est, &b) in estimators.iter_mut().zip(&unclipped) {
            let z = state.streams.count_noise(est.count_noise());
            est.update(b, z);
        }
    }

    let report = StepReport {
        step: state.step,
        batch_size: indices.len(),
        loss: loss_value,
        thresholds,
        unclipped,
        noise_stds: plan.stds,
        norms: states.into_iter().map(|s| s.norms).collect(),
        peak_grad_bytes,
        clip_time,
    };
    state.step += 1;
    Ok(report)
}

fn apply_update(state: &mut TrainState, updates: &[Vec<f64>], cfg: &StepConfig) -> Result<()> {
    let lr = cfg.lr;
    match (&mut state.moments, cfg.rule) {
        (Moments::None, UpdateRule::Sgd { .. }) => {
            for (k, g) in updates.iter().enumerate() {
                state.model.apply_group_delta(k, g, -lr);
            }
        }
        (Moments::Momentum(vel), UpdateRule::Sgd { momentum }) => {
            let mut off = 0;
            for (k, g) in updates.iter().enumerate() {
                let v = &mut vel[off..off + g.len()];
                v.iter_mut()
                    .zip(g)
                    .for_each(|(v, g)| *v = momentum * *v + g);
                state.model.apply_group_delta(k, v, -lr);
                off += g.len();
            }
        }
        (Moments::Adam { m, v, t }, UpdateRule::Adam { beta1, beta2, eps }) => {
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            let mut off = 0;
            for (k, g) in updates.iter().enumerate() {
                let n = g.len();
                let (mk, vk) = (&mut m[off..off + n], &mut v[off..off + n]);
                let mut delta = vec![0.0; n];
                for i in 0..n {
                    mk[i] = beta1 * mk[i] + (1.0 - beta1) * g[i];
                    vk[i] = beta2 * vk[i] + (1.0 - beta2) * g[i] * g[i];
                    delta[i] = (mk[i] / c1) / ((vk[i] / c2).sqrt() + eps);
                }
                state.model.apply_group_delta(k, &delta, -lr);
                off += n;
            }
        }
        (moments, rule) => {
            return Err(Error::State(format!(
                "optimizer state {} does not fit update rule {rule:?}",
                match moments {
                    Moments::None => "without moments",
                    Moments::Momentum(_) => "with momentum",
                    Moments::Adam { .. } => "with Adam moments",
                }
            )))
        }
    }
    Ok(())
}
