//! Clipping-mode throughput and memory on a fixed MLP.
//!
//! Each mode trains the same model on the same fixed batch. Only the
//! backward-and-clip region is timed; the first `warmup` steps are dropped
//! and the median of the rest is reported.

use std::fmt;
use std::time::Duration;

use groupclip_core::clip::{release_scratch, ClipPolicy};
use groupclip_core::nn::{Activation, LossKind, MlpSpec, Model, Targets};
use groupclip_core::optim::{
    dp_step, BatchSpec, ClipBackend, Dataset, StepConfig, TrainState, UpdateRule,
};
use groupclip_core::privacy::NoiseStrategy;
use groupclip_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    NonPrivate,
    /// Flat clipping by materializing every per-example gradient.
    NaiveFlat,
    /// Flat clipping from cached activations and output gradients.
    TwoPhaseFlat,
    /// Per-layer clipping fused into backpropagation.
    FusedPerLayer,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [
        BenchMode::NonPrivate,
        BenchMode::NaiveFlat,
        BenchMode::TwoPhaseFlat,
        BenchMode::FusedPerLayer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchMode::NonPrivate => "nonprivate",
            BenchMode::NaiveFlat => "naive-flat",
            BenchMode::TwoPhaseFlat => "two-phase-flat",
            BenchMode::FusedPerLayer => "fused-perlayer",
        }
    }

    fn setup(&self, groups: usize, threshold: f64) -> (ClipPolicy, ClipBackend) {
        match self {
            BenchMode::NonPrivate => (ClipPolicy::NonPrivate, ClipBackend::Fused),
            BenchMode::NaiveFlat => (ClipPolicy::Flat(threshold), ClipBackend::Naive),
            BenchMode::TwoPhaseFlat => (ClipPolicy::Flat(threshold), ClipBackend::Fused),
            BenchMode::FusedPerLayer => (
                ClipPolicy::fixed_from_global(threshold, groups),
                ClipBackend::Fused,
            ),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Layer widths from input to output.
    pub widths: Vec<usize>,
    pub batch_size: usize,
    pub warmup: usize,
    /// Timed steps after the warmup.
    pub steps: usize,
    pub threshold: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    /// Three hidden layers of 512 on 512 inputs and 10 classes, `B = 256`.
    fn default() -> Self {
        BenchConfig {
            widths: vec![512, 512, 512, 512, 10],
            batch_size: 256,
            warmup: 20,
            steps: 100,
            threshold: 1.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub median: Duration,
    pub peak_grad_bytes: usize,
}

impl BenchRow {
    pub fn median_ms(&self) -> f64 {
        self.median.as_secs_f64() * 1e3
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

fn bench_data(cfg: &BenchConfig, rng: &mut ChaCha20Rng) -> Result<Dataset> {
    let (d, c, b) = (cfg.widths[0], *cfg.widths.last().unwrap(), cfg.batch_size);
    let x: Vec<f64> = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    Ok(Dataset::new(
        Tensor::new(vec![b, d], x)?,
        Targets::Classes(y),
        LossKind::CrossEntropy,
    )?)
}

/// One mode's model, batch and step settings, ready to step.
struct Runner {
    mode: BenchMode,
    state: TrainState,
    data: Dataset,
    step: StepConfig,
    times: Vec<Duration>,
    peak: usize,
}

impl Runner {
    fn new(cfg: &BenchConfig, mode: BenchMode) -> Result<Self> {
        if cfg.widths.len() < 2 || cfg.batch_size == 0 || cfg.steps == 0 {
            return Err(HarnessError::Config(
                "bench needs two or more widths, a batch and at least one timed step".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let model = Model::mlp(
            &MlpSpec::new(cfg.widths.clone(), Activation::Relu),
            &mut rng,
        )?;
        let data = bench_data(cfg, &mut rng)?;
        let (policy, backend) = mode.setup(model.num_groups(), cfg.threshold);
        let rule = UpdateRule::sgd();
        let state = TrainState::new(model, &policy, &rule, cfg.batch_size, cfg.seed)?;
        let step = StepConfig {
            rule,
            lr: 1e-3,
            strategy: NoiseStrategy::Global,
            noise_multiplier: cfg.sigma,
            batch: BatchSpec::Fixed(cfg.batch_size),
            backend,
        };
        Ok(Runner {
            mode,
            state,
            data,
            step,
            times: Vec::with_capacity(cfg.steps),
            peak: 0,
        })
    }

    fn step(&mut self, indices: &[usize], timed: bool) -> Result<()> {
        let r = dp_step(&mut self.state, &self.data, indices, &self.step)?;
        if timed {
            self.times.push(r.clip_time);
            self.peak = self.peak.max(r.peak_grad_bytes);
        }
        Ok(())
    }

    fn finish(self) -> BenchRow {
        BenchRow {
            mode: self.mode,
            median: median(self.times),
            peak_grad_bytes: self.peak,
        }
    }
}

/// Steps every runner once per round, so slow stretches of machine load hit
/// all of them alike.
fn run_interleaved(cfg: &BenchConfig, runners: &mut [Runner]) -> Result<()> {
    let indices: Vec<usize> = (0..cfg.batch_size).collect();
    for i in 0..cfg.warmup + cfg.steps {
        for r in runners.iter_mut() {
            r.step(&indices, i >= cfg.warmup)?;
        }
    }
    release_scratch();
    Ok(())
}

pub fn bench_mode(cfg: &BenchConfig, mode: BenchMode) -> Result<BenchRow> {
    let mut runner = [Runner::new(cfg, mode)?];
    run_interleaved(cfg, &mut runner)?;
    let [r] = runner;
    Ok(r.finish())
}

/// Benchmarks `modes`, returning rows in the same order. All modes but the
/// naive one are interleaved step by step; naive steps sweep gigabytes
/// through the cache, so that mode runs in a block of its own.
pub fn bench(cfg: &BenchConfig, modes: &[BenchMode]) -> Result<Vec<BenchRow>> {
    let mut shared = modes
        .iter()
        .filter(|&&m| m != BenchMode::NaiveFlat)
        .map(|&m| Runner::new(cfg, m))
        .collect::<Result<Vec<_>>>()?;
    run_interleaved(cfg, &mut shared)?;
    let mut rows: Vec<BenchRow> = shared.into_iter().map(Runner::finish).collect();
    if let Some(i) = modes.iter().position(|&m| m == BenchMode::NaiveFlat) {
        rows.insert(i, bench_mode(cfg, BenchMode::NaiveFlat)?);
    }
    Ok(rows)
}

/// Plain-text table with times relative to the non-private row when present.
pub fn format_table(cfg: &BenchConfig, rows: &[BenchRow]) -> String {
    let base = rows
        .iter()
        .find(|r| r.mode == BenchMode::NonPrivate)
        .map(|r| r.median_ms());
    let mut s = format!(
        "widths {:?}, batch {}, median of {} steps after {} warmup\n",
        cfg.widths, cfg.batch_size, cfg.steps, cfg.warmup
    );
    s.push_str(&format!(
        "{:<16} {:>12} {:>14} {:>10} {:>18}\n",
        "mode", "median_ms", "examples/s", "vs_plain", "peak_grad_bytes"
    ));
    for r in rows {
        let ms = r.median_ms();
        let rel = base.map_or("-".to_string(), |b| format!("{:.2}x", ms / b));
        s.push_str(&format!(
            "{:<16} {:>12.3} {:>14.0} {:>10} {:>18}\n",
            r.mode.as_str(),
            ms,
            cfg.batch_size as f64 / r.median.as_secs_f64(),
            rel,
            r.peak_grad_bytes
        ));
    }
    s
}
