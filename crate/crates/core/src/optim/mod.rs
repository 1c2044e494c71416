//! The private training loop.

mod checkpoint;
mod step;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use step::{dp_step, ClipBackend, ClipState, Moments, StepConfig, StepReport, TrainState};
pub use train::{flat_train_reference, resume, train, MetricsSink, NullSink, TrainConfig};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{forward, loss, LossKind, Model, Targets};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateRule {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn sgd() -> Self {
        UpdateRule::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            UpdateRule::Sgd { momentum } if (0.0..1.0).contains(&momentum) => Ok(()),
            UpdateRule::Sgd { momentum } => {
                Err(Error::Config(format!("momentum {momentum} outside [0, 1)")))
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return Err(Error::Config(format!(
                        "Adam parameters beta1 = {beta1}, beta2 = {beta2}, eps = {eps} out of range"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear from `initial` at step 0 to `last` at the final step.
    LinearDecay {
        initial: f64,
        last: f64,
    },
}

impl LrSchedule {
    pub fn at(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::LinearDecay { initial, last } => {
                if total <= 1 {
                    initial
                } else {
                    let f = step as f64 / (total - 1) as f64;
                    initial + (last - initial) * f
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant(lr) => lr > 0.0 && lr.is_finite(),
            LrSchedule::LinearDecay { initial, last } => {
                initial > 0.0 && last > 0.0 && initial.is_finite() && last.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "learning rates must be positive: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchSpec {
    /// Each example joins independently with probability `rho`.
    Poisson(f64),
    /// `B` examples uniformly without replacement.
    Fixed(usize),
}

impl BatchSpec {
    /// Batch size `B` used to normalize updates and clip counts.
    pub fn nominal(&self, dataset_len: usize) -> usize {
        match *self {
            BatchSpec::Poisson(rho) => ((rho * dataset_len as f64).round() as usize).max(1),
            BatchSpec::Fixed(b) => b,
        }
    }

    /// Sampling rate for accounting.
    pub fn rate(&self, dataset_len: usize) -> f64 {
        match *self {
            BatchSpec::Poisson(rho) => rho,
            BatchSpec::Fixed(b) => b as f64 / dataset_len as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub rule: UpdateRule,
    pub schedule: LrSchedule,
    pub batch: BatchSpec,
    pub steps: u64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        self.schedule.validate()?;
        match self.batch {
            BatchSpec::Poisson(rho) if !(0.0..=1.0).contains(&rho) => {
                Err(Error::Config(format!("sampling rate {rho} outside [0, 1]")))
            }
            BatchSpec::Fixed(0) => Err(Error::Config("batch size must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Inputs with their targets; example `i` is row `i` of the leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub kind: LossKind,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, kind: LossKind) -> Result<Self> {
        let rows = inputs.rows();
        let ok = match &targets {
            Targets::Classes(c) => c.len() == rows,
            Targets::Values(v) => v.rows() == rows,
        };
        if !ok {
            return Err(Error::dim("dataset", "targets do not match the input rows"));
        }
        Ok(Dataset {
            inputs,
            targets,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        let x = self.inputs.select(indices)?;
        let t = self
            .targets
            .select(indices, self.inputs.rows_per_example())?;
        Ok((x, t))
    }

    pub fn range(&self, start: usize, end: usize) -> Result<(Tensor, Targets)> {
        let x = self.inputs.slice_batch(start, end)?;
        let t = self
            .targets
            .slice(start, end, self.inputs.rows_per_example())?;
        Ok((x, t))
    }
}

/// Sorted indices of one minibatch.
pub fn sample_minibatch<R: Rng + ?Sized>(
    len: usize,
    spec: BatchSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Input("cannot sample from an empty dataset".into()));
    }
    match spec {
        BatchSpec::Poisson(rho) => {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Input(format!("sampling rate {rho} outside [0, 1]")));
            }
            Ok((0..len).filter(|_| rng.random::<f64>() < rho).collect())
        }
        BatchSpec::Fixed(b) => {
            if b > len {
                return Err(Error::Input(format!(
                    "batch of {b} requested from {len} examples"
                )));
            }
            let mut idx = index::sample(rng, len, b).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

/// Mean loss and, for classification, accuracy over the whole dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, Option<f64>)> {
    const CHUNK: usize = 512;
    let (mut total_loss, mut correct, mut rows) = (0.0, 0usize, 0usize);
    let mut start = 0;
    while start < data.len() {
        let end = (start + CHUNK).min(data.len());
        let (x, t) = data.range(start, end)?;
        let (logits, _) = forward(model, &x)?;
        let (l, _) = loss(&logits, &t, data.kind)?;
        total_loss += l * (end - start) as f64;
        if let Targets::Classes(labels) = &t {
            correct += logits
                .argmax_rows()
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count();
            rows += labels.len();
        }
        start = end;
    }
    let acc = match data.targets {
        Targets::Classes(_) => Some(correct as f64 / rows as f64),
        Targets::Values(_) => None,
    };
    Ok((total_loss / data.len() as f64, acc))
}
