//! Turning a [`RunConfig`] into a training run and its artifacts.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use groupclip_core::clip::{AdaptiveClipping, ClipPolicy};
use groupclip_core::nn::{Activation, MlpSpec, Model, Targets};
use groupclip_core::optim::{
    evaluate, train, write_checkpoint, BatchSpec, ClipBackend, Dataset, LrSchedule,
    OptimizerConfig, StepReport, TrainConfig, TrainState, UpdateRule,
};
use groupclip_core::privacy::{budget_fraction, NoiseStrategy, PrivacySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{ActivationName, Mode, RuleName, RunConfig, Sampling, StrategyName, TaskKind};
use crate::data::{gen_synthetic, idx_dataset, SyntheticSpec, TaskData};
use crate::error::{HarnessError, Result};
use crate::telemetry::{quantile_sorted, write_metrics, write_norms, MetricsRow, NormHistogram};

/// ChaCha stream used for model initialization, apart from the training
/// streams of the same seed.
const INIT_STREAM: u64 = 1 << 62;

pub fn load_task(cfg: &RunConfig) -> Result<TaskData> {
    let t = &cfg.task;
    match t.kind {
        TaskKind::GaussianMixture | TaskKind::Drift => gen_synthetic(
            &SyntheticSpec {
                train_size: t.train_size,
                test_size: t.test_size,
                dim: t.dim,
                classes: t.classes,
                separation: t.separation,
                drift: t.kind == TaskKind::Drift,
            },
            cfg.seed,
        ),
        TaskKind::Idx => {
            let p = |o: &Option<std::path::PathBuf>| o.clone().expect("validated");
            Ok(TaskData {
                train: idx_dataset(&p(&t.train_images), &p(&t.train_labels))?,
                test: idx_dataset(&p(&t.test_images), &p(&t.test_labels))?,
            })
        }
    }
}

fn class_count(data: &TaskData) -> usize {
    let max = |d: &Dataset| match &d.targets {
        Targets::Classes(c) => c.iter().copied().max().unwrap_or(0),
        Targets::Values(_) => 0,
    };
    max(&data.train).max(max(&data.test)) + 1
}

pub fn build_model(cfg: &RunConfig, data: &TaskData) -> Result<Model> {
    let mut widths = vec![data.train.inputs.width()];
    widths.extend(&cfg.model.hidden);
    widths.push(class_count(data).max(2));
    let activation = match cfg.model.activation {
        ActivationName::Relu => Activation::Relu,
        ActivationName::Tanh => Activation::Tanh,
    };
    let mut spec = MlpSpec::new(widths, activation);
    spec.init_gains = cfg.model.init_gains.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    Ok(Model::mlp(&spec, &mut rng)?)
}

/// Everything a run needs, resolved against the data.
#[derive(Clone, Debug)]
pub struct Plan {
    pub data: TaskData,
    pub model: Model,
    pub policy: ClipPolicy,
    pub spec: PrivacySpec,
    pub train: TrainConfig,
    pub steps_per_epoch: u64,
}

pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> u64 {
    ((dataset_len as f64 / batch_size as f64).round() as u64).max(1)
}

pub fn resolve_privacy(
    cfg: &RunConfig,
    rate: f64,
    steps: u64,
    groups: usize,
) -> Result<PrivacySpec> {
    let p = &cfg.privacy;
    let mode = cfg.policy.mode;
    if mode == Mode::Nonprivate {
        return Ok(PrivacySpec::nonprivate(rate, steps));
    }
    let base = match (p.epsilon, p.sigma) {
        (Some(eps), None) => PrivacySpec::calibrate(eps, p.delta, rate, steps, 0.0, groups)?,
        (None, Some(sigma)) => PrivacySpec::from_sigma(sigma, p.delta, rate, steps, 0.0, groups)?,
        _ => {
            return Err(HarnessError::Config(
                "need exactly one of epsilon and sigma".into(),
            ))
        }
    };
    if mode != Mode::AdaptivePerlayer {
        return Ok(base);
    }
    let r = match p.sigma_b {
        Some(sb) => budget_fraction(base.sigma, sb, groups),
        None => p.budget_fraction.unwrap_or(0.01),
    };
    if !(r > 0.0 && r < 1.0) {
        return Err(HarnessError::Config(format!(
            "adaptive clipping needs a budget fraction in (0, 1), got {r}"
        )));
    }
    let mut spec = PrivacySpec::from_sigma(base.sigma, p.delta, rate, steps, r, groups)?;
    if p.epsilon.is_some() {
        spec.epsilon = base.epsilon;
    }
    Ok(spec)
}

pub fn build_policy(cfg: &RunConfig, groups: usize, spec: &PrivacySpec) -> ClipPolicy {
    let p = &cfg.policy;
    let c = p.threshold;
    match p.mode {
        Mode::Nonprivate => ClipPolicy::NonPrivate,
        Mode::Flat => ClipPolicy::Flat(c),
        Mode::FixedPerlayer => ClipPolicy::fixed_from_global(c, groups),
        Mode::AdaptivePerlayer => ClipPolicy::AdaptivePerLayer(AdaptiveClipping {
            target_quantile: p.target_quantile,
            quantile_lr: p.quantile_lr,
            count_noise: spec.count_std(),
            initial: p
                .initial_thresholds
                .clone()
                .unwrap_or_else(|| vec![c / (groups as f64).sqrt(); groups]),
            equivalent_global: p.equivalent_global.then_some(c),
        }),
    }
}

pub fn plan(cfg: &RunConfig) -> Result<Plan> {
    cfg.validate()?;
    let data = load_task(cfg)?;
    let model = build_model(cfg, &data)?;
    let groups = model.num_groups();
    let o = &cfg.optimizer;
    let n = data.train.len();
    if o.sampling == Sampling::Fixed && o.batch_size > n {
        return Err(HarnessError::Config(format!(
            "batch of {} from {n} training examples",
            o.batch_size
        )));
    }
    let rate = (o.batch_size as f64 / n as f64).min(1.0);
    let spe = steps_per_epoch(n, o.batch_size);
    let steps = o.epochs * spe;
    let spec = resolve_privacy(cfg, rate, steps, groups)?;
    let policy = build_policy(cfg, groups, &spec);
    let rule = match o.rule {
        RuleName::Sgd => UpdateRule::Sgd {
            momentum: o.momentum,
        },
        RuleName::Adam => UpdateRule::Adam {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.adam_eps,
        },
    };
    let schedule = match o.lr_final {
        Some(last) => LrSchedule::LinearDecay {
            initial: o.lr,
            last,
        },
        None => LrSchedule::Constant(o.lr),
    };
    let batch = match o.sampling {
        Sampling::Poisson => BatchSpec::Poisson(rate),
        Sampling::Fixed => BatchSpec::Fixed(o.batch_size),
    };
    let strategy = match cfg.policy.noise_strategy {
        StrategyName::Global => NoiseStrategy::Global,
        StrategyName::EqualBudget => NoiseStrategy::EqualBudget,
        StrategyName::EqualSnr => NoiseStrategy::EqualSnr,
    };
    let train = TrainConfig {
        optimizer: OptimizerConfig {
            rule,
            schedule,
            batch,
            steps,
        },
        strategy,
        backend: ClipBackend::Fused,
        seed: cfg.seed,
    };
    Ok(Plan {
        data,
        model,
        policy,
        spec,
        train,
        steps_per_epoch: spe,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub groups: usize,
    pub spec: PrivacySpec,
    pub metrics: Vec<MetricsRow>,
    pub norms: Vec<NormHistogram>,
    /// `[epoch][group]`: median of every per-example group norm seen in
    /// that epoch (empty when no norms were computed).
    pub epoch_medians: Vec<Vec<f64>>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub state: TrainState,
}

fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model, data)?.1.unwrap_or(f64::NAN))
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let plan = plan(cfg)?;
    let groups = plan.model.num_groups();
    let spe = plan.steps_per_epoch;
    let total = plan.train.optimizer.steps;
    let telemetry = &cfg.telemetry;

    let mut metrics = Vec::with_capacity(total as usize);
    let mut norms = Vec::new();
    let mut epoch_medians = Vec::new();
    let mut epoch_norms: Vec<Vec<f64>> = vec![Vec::new(); groups];
    let test = &plan.data.test;

    let mut sink = |state: &TrainState, r: &StepReport| -> groupclip_core::Result<()> {
        let epoch_end = (r.step + 1).is_multiple_of(spe) || r.step + 1 == total;
        let accuracy = if epoch_end {
            evaluate(&state.model, test)?.1
        } else {
            None
        };
        metrics.push(MetricsRow {
            step: r.step,
            epoch: r.step / spe + 1,
            loss: r.loss,
            accuracy,
            thresholds: r.thresholds.clone(),
            clipped_fraction: (0..groups).map(|k| r.clipped_fraction(k)).collect(),
            noise_std: r.noise_stds.clone(),
            wall_time_ms: if telemetry.wall_time {
                r.clip_time.as_secs_f64() * 1e3
            } else {
                0.0
            },
            peak_grad_bytes: r.peak_grad_bytes,
        });
        for (k, n) in r.norms.iter().enumerate() {
            if n.is_empty() {
                continue;
            }
            if r.step.is_multiple_of(telemetry.norms_every) {
                norms.push(NormHistogram::from_norms(r.step, k + 1, n));
            }
            epoch_norms[k].extend_from_slice(n);
        }
        if epoch_end {
            let medians = epoch_norms
                .iter_mut()
                .filter(|v| !v.is_empty())
                .map(|v| {
                    v.sort_by(f64::total_cmp);
                    let m = quantile_sorted(v, 0.5);
                    v.clear();
                    m
                })
                .collect();
            epoch_medians.push(medians);
        }
        Ok(())
    };
    let state = train(
        &plan.train,
        plan.model.clone(),
        &plan.data.train,
        &plan.policy,
        &plan.spec,
        &mut sink,
    )?;
    Ok(RunOutcome {
        groups,
        spec: plan.spec,
        metrics,
        norms,
        epoch_medians,
        train_accuracy: accuracy(&state.model, &plan.data.train)?,
        test_accuracy: accuracy(&state.model, &plan.data.test)?,
        state,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

/// Writes `metrics.csv`, `norms.csv`, `checkpoint.bin` and the resolved
/// `config.toml` into `dir`. The saved config leaves out the output
/// directory, so identical runs give identical files wherever they land.
pub fn write_artifacts(outcome: &RunOutcome, cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_metrics(
        create(&dir.join("metrics.csv"))?,
        outcome.groups,
        &outcome.metrics,
    )?;
    write_norms(create(&dir.join("norms.csv"))?, &outcome.norms)?;
    write_checkpoint(&outcome.state, create(&dir.join("checkpoint.bin"))?)?;
    let path = dir.join("config.toml");
    let saved = RunConfig {
        out: None,
        ..cfg.clone()
    };
    std::fs::write(&path, saved.to_toml()).map_err(|e| HarnessError::io(&path, e))?;
    Ok(())
}
