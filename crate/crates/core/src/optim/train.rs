use super::step::{dp_step, ClipBackend, StepConfig, StepReport, TrainState};
use super::{sample_minibatch, Dataset, OptimizerConfig};
use crate::clip::ClipPolicy;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::privacy::{split_budget, NoiseStrategy, PrivacySpec};

/// Receives one record per step, after the step's update.
pub trait MetricsSink {
    fn record(&mut self, state: &TrainState, report: &StepReport) -> Result<()>;
}

/// Discards every record.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &TrainState, _: &StepReport) -> Result<()> {
        Ok(())
    }
}

impl<F> MetricsSink for F
where
    F: FnMut(&TrainState, &StepReport) -> Result<()>,
{
    fn record(&mut self, state: &TrainState, report: &StepReport) -> Result<()> {
        self(state, report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub strategy: NoiseStrategy,
    pub backend: ClipBackend,
    pub seed: u64,
}

/// Checks that adaptive count noise is the `sigma_b` the privacy split
/// assumed.
fn check_privacy(policy: &ClipPolicy, spec: &PrivacySpec, groups: usize) -> Result<()> {
    if !(spec.sigma_new >= 0.0) {
        return Err(Error::Config(format!(
            "noise multiplier {}",
            spec.sigma_new
        )));
    }
    if let ClipPolicy::AdaptivePerLayer(a) = policy {
        if spec.sigma > 0.0 {
            let implied = split_budget(spec.sigma, a.count_noise, groups)?;
            if (implied - spec.sigma_new).abs() > 1e-9 * spec.sigma_new {
                return Err(Error::Config(format!(
                    "count noise {} implies gradient multiplier {implied}, spec has {}",
                    a.count_noise, spec.sigma_new
                )));
            }
        }
    }
    Ok(())
}

/// Trains `model` for `config.optimizer.steps` steps.
pub fn train(
    config: &TrainConfig,
    model: Model,
    data: &Dataset,
    policy: &ClipPolicy,
    spec: &PrivacySpec,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    config.optimizer.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    check_privacy(policy, spec, model.num_groups())?;
    let nominal = config.optimizer.batch.nominal(data.len());
    let state = TrainState::new(model, policy, &config.optimizer.rule, nominal, config.seed)?;
    resume(state, config, data, spec, sink)
}

/// Continues from `state` until `config.optimizer.steps` steps are done.
pub fn resume(
    mut state: TrainState,
    config: &TrainConfig,
    data: &Dataset,
    spec: &PrivacySpec,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    let opt = &config.optimizer;
    while state.step < opt.steps {
        let indices = sample_minibatch(data.len(), opt.batch, state.streams.sampler())?;
        let step_cfg = StepConfig {
            rule: opt.rule,
            lr: opt.schedule.at(state.step, opt.steps),
            strategy: config.strategy,
            noise_multiplier: spec.sigma_new,
            batch: opt.batch,
            backend: config.backend,
        };
        let report = dp_step(&mut state, data, &indices, &step_cfg)?;
        sink.record(&state, &report)?;
    }
    Ok(state)
}

/// [`train`] with flat clipping at `threshold`.
pub fn flat_train_reference(
    config: &TrainConfig,
    model: Model,
    data: &Dataset,
    threshold: f64,
    spec: &PrivacySpec,
    sink: &mut dyn MetricsSink,
) -> Result<TrainState> {
    train(
        config,
        model,
        data,
        &ClipPolicy::Flat(threshold),
        spec,
        sink,
    )
}
