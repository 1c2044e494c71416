//! Simulated pipeline-parallel private training.
//!
//! A model is cut into consecutive chunks, one per virtual device. Each
//! minibatch is split into `J` microbatches that flow through a GPipe
//! schedule on a virtual clock; the schedule's event list is then executed in
//! order on one thread. With per-device clipping each device clips its own
//! chunk's per-example gradients at its own threshold and adds its own noise,
//! so the only synchronization is the final update. Flat clipping needs every
//! device's norm share for every microbatch before any device can scale, which
//! the simulator makes explicit through barriers and workaround costs.

mod schedule;

pub use schedule::{
    build_schedule, ClipMode, CostModel, Event, MessageType, Schedule, Stage, Workaround,
};

use std::collections::BTreeMap;
use std::ops::Range;

use crate::clip::{clip_scale, fused_clipped_sum, ghost_norms};
use crate::error::{Error, Result};
use crate::nn::{backward_layers, forward_layers, loss, Layer, LossKind, Model, Targets};
use crate::privacy::fill_gaussian;
use crate::quantile::count_below;
use crate::rng::gradient_rng;
use crate::tensor::Tensor;

/// Per hosted group, the `(a, e)` factors of one microbatch.
type GroupFactors = Vec<(Tensor, Tensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Layer range hosted by each device, in order.
    pub partition: Vec<Range<usize>>,
    /// Microbatches per minibatch `J`.
    pub microbatches: usize,
    /// Per-device thresholds `C_k`.
    pub thresholds: Vec<f64>,
    /// Noise multiplier `sigma`.
    pub sigma: f64,
    pub lr: f64,
    pub costs: CostModel,
}

impl PipelineConfig {
    /// Thresholds for flat clipping: the joint norm of the per-device ones.
    pub fn flat_threshold(&self) -> f64 {
        self.thresholds.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn devices(&self) -> usize {
        self.partition.len()
    }

    fn validate(&self, model: &Model) -> Result<()> {
        let layers = model.layers();
        if self.partition.is_empty() {
            return Err(Error::Config("partition has no devices".into()));
        }
        let mut next = 0;
        for (k, r) in self.partition.iter().enumerate() {
            if r.start != next || r.end <= r.start {
                return Err(Error::Config(format!(
                    "device {k} hosts layers {r:?}; chunks must be consecutive and nonempty"
                )));
            }
            if !layers[r.start..r.end.min(layers.len())]
                .iter()
                .any(|l| matches!(l, Layer::Linear(_)))
            {
                return Err(Error::Config(format!("device {k} hosts no Linear layer")));
            }
            next = r.end;
        }
        if next != layers.len() {
            return Err(Error::Config(format!(
                "partition covers {next} of {} layers",
                layers.len()
            )));
        }
        if self.thresholds.len() != self.partition.len() {
            return Err(Error::Config(format!(
                "{} thresholds for {} devices",
                self.thresholds.len(),
                self.partition.len()
            )));
        }
        if let Some(c) = self.thresholds.iter().find(|&&c| !(c > 0.0)) {
            return Err(Error::Config(format!("threshold {c} is not positive")));
        }
        if self.microbatches == 0 {
            return Err(Error::Config("need at least one microbatch".into()));
        }
        if !(self.sigma >= 0.0 && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "sigma {} and learning rate {} out of range",
                self.sigma, self.lr
            )));
        }
        self.costs.validate()
    }
}

/// Splits `model`'s Linear layers into `devices` near-equal consecutive runs;
/// activations stay with the Linear layer before them.
pub fn balanced_partition(model: &Model, devices: usize) -> Result<Vec<Range<usize>>> {
    let k = model.num_groups();
    if devices == 0 || devices > k {
        return Err(Error::Config(format!(
            "cannot spread {k} Linear layers over {devices} devices"
        )));
    }
    let mut starts = Vec::with_capacity(devices);
    let mut group = 0;
    for d in 0..devices {
        starts.push(if d == 0 { 0 } else { model.group_layer(group) });
        group += k / devices + usize::from(d < k % devices);
    }
    let n = model.layers().len();
    Ok((0..devices)
        .map(|d| starts[d]..starts.get(d + 1).copied().unwrap_or(n))
        .collect())
}

/// Per-coordinate noise std on a device with equal-budget allocation:
/// `sigma * sqrt(K) * C_k`, known from local state alone.
pub fn device_noise_std(sigma: f64, devices: usize, threshold: f64) -> f64 {
    sigma * (devices as f64).sqrt() * threshold
}

/// Microbatch boundaries: `J` contiguous slices whose sizes differ by at
/// most one, the larger ones first.
pub fn microbatch_ranges(batch: usize, microbatches: usize) -> Result<Vec<Range<usize>>> {
    if microbatches == 0 || microbatches > batch {
        return Err(Error::Config(format!(
            "cannot split a batch of {batch} into {microbatches} microbatches"
        )));
    }
    let (base, extra) = (batch / microbatches, batch % microbatches);
    let mut start = 0;
    Ok((0..microbatches)
        .map(|j| {
            let len = base + usize::from(j < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLog {
    pub activation_messages: u64,
    pub gradient_messages: u64,
    pub norm_messages: u64,
    pub syncs: u64,
    /// Noise vectors added, per device.
    pub noise_additions: Vec<u64>,
    pub busy: Vec<f64>,
    pub makespan: f64,
}

impl CommLog {
    pub fn idle(&self, device: usize) -> f64 {
        self.makespan - self.busy[device]
    }
}

/// One simulated device.
#[derive(Clone, Debug)]
pub struct DeviceState {
    pub id: usize,
    pub layers: Vec<Layer>,
    pub first_group: usize,
    pub threshold: f64,
    /// Clipped sums per hosted group, weight then bias.
    pub accumulator: Vec<Vec<f64>>,
    /// Host-side copies of each microbatch's input.
    store: BTreeMap<usize, Tensor>,
}

impl DeviceState {
    fn groups(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Linear(_)))
            .count()
    }

    fn group_sizes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(lin) => Some(lin.param_count()),
                _ => None,
            })
            .collect()
    }

    /// Resets the accumulator to fresh noise (or zeros).
    fn init_accumulator(&mut self, std: f64, seed: u64, step: u64) {
        self.accumulator = self
            .group_sizes()
            .into_iter()
            .map(|d| vec![0.0; d])
            .collect();
        if std != 0.0 {
            for (i, acc) in self.accumulator.iter_mut().enumerate() {
                let mut rng = gradient_rng(seed, step, self.first_group + i);
                fill_gaussian(&mut rng, std, acc);
            }
        }
    }

    /// Runs the chunk on `input`, keeping a copy of the input.
    pub fn local_forward(&mut self, microbatch: usize, input: Tensor) -> Result<Tensor> {
        let (out, _) = forward_layers(&self.layers, &input)?;
        self.store.insert(microbatch, input);
        Ok(out)
    }

    /// Recomputes the chunk's activations from the stored input and
    /// backpropagates `grad_out`, returning each hosted group's `(a, e)` and
    /// the input gradient (unless this is the first device).
    fn rematerialize_backward(
        &self,
        microbatch: usize,
        grad_out: Tensor,
    ) -> Result<(GroupFactors, Option<Tensor>)> {
        let input = self.store.get(&microbatch).ok_or_else(|| {
            Error::State(format!(
                "device {} has no stored activations for microbatch {microbatch}",
                self.id
            ))
        })?;
        let (_, inputs) = forward_layers(&self.layers, input)?;
        let mut pairs: Vec<Option<(Tensor, Tensor)>> = vec![None; self.groups()];
        let grad_in = backward_layers(
            &self.layers,
            &inputs,
            grad_out,
            0,
            self.id > 0,
            |g, a, e| {
                pairs[g] = Some((a.clone(), e.clone()));
                Ok(())
            },
        )?;
        let pairs = pairs
            .into_iter()
            .map(|p| p.expect("every hosted group is visited"))
            .collect();
        Ok((pairs, grad_in))
    }

    fn accumulate(&mut self, pairs: &[(Tensor, Tensor)], scales: &[f64]) -> Result<()> {
        for (acc, (a, e)) in self.accumulator.iter_mut().zip(pairs) {
            let (gw, gb) = fused_clipped_sum(a, e, scales)?;
            let sum = gw.data().iter().chain(gb.data());
            acc.iter_mut().zip(sum).for_each(|(u, g)| *u += g);
        }
        Ok(())
    }

    /// Clips this device's per-example gradients jointly at `C_k` and adds
    /// them to the accumulator. Returns the input gradient and the clip count.
    pub fn local_backward(
        &mut self,
        microbatch: usize,
        grad_out: Tensor,
    ) -> Result<(Option<Tensor>, usize)> {
        let (pairs, grad_in) = self.rematerialize_backward(microbatch, grad_out)?;
        self.store.remove(&microbatch);
        let sq = local_norms_sq(&pairs)?;
        let norms: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
        let scales: Vec<f64> = norms
            .iter()
            .map(|&n| clip_scale(n, self.threshold))
            .collect();
        self.accumulate(&pairs, &scales)?;
        Ok((grad_in, count_below(&norms, self.threshold)))
    }
}

fn local_norms_sq(pairs: &[(Tensor, Tensor)]) -> Result<Vec<f64>> {
    let mut total: Vec<f64> = Vec::new();
    for (k, (a, e)) in pairs.iter().enumerate() {
        let n = ghost_norms(a, e)?;
        if n.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite per-example norm in hosted group {k}"
            )));
        }
        if total.is_empty() {
            total = n;
        } else {
            total.iter_mut().zip(&n).for_each(|(t, v)| *t += v);
        }
    }
    Ok(total)
}

/// Outcome of one simulated minibatch.
#[derive(Clone, Debug)]
pub struct PipelineStep {
    pub comm: CommLog,
    pub schedule: Schedule,
    /// Mean per-example loss over the minibatch.
    pub loss: f64,
    /// Per device: examples at or below its threshold (flat: the joint count,
    /// repeated).
    pub unclipped: Vec<usize>,
}

/// A model spread over simulated devices.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    devices: Vec<DeviceState>,
}

impl Pipeline {
    pub fn new(model: &Model, config: PipelineConfig) -> Result<Self> {
        config.validate(model)?;
        let mut devices = Vec::with_capacity(config.devices());
        let mut first_group = 0;
        for (k, r) in config.partition.iter().enumerate() {
            let layers = model.layer_chunk(r.clone()).to_vec();
            let d = DeviceState {
                id: k,
                layers,
                first_group,
                threshold: config.thresholds[k],
                accumulator: Vec::new(),
                store: BTreeMap::new(),
            };
            first_group += d.groups();
            devices.push(d);
        }
        Ok(Pipeline { config, devices })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    /// Reassembles the full model.
    pub fn model(&self) -> Result<Model> {
        Model::new(
            self.devices
                .iter()
                .flat_map(|d| d.layers.iter().cloned())
                .collect(),
        )
    }

    /// One update with per-device clipping (equal-budget noise).
    pub fn step(
        &mut self,
        inputs: &Tensor,
        targets: &Targets,
        kind: LossKind,
        seed: u64,
        step: u64,
    ) -> Result<PipelineStep> {
        self.run(inputs, targets, kind, seed, step, ClipMode::PerDevice)
    }

    /// One update with exact flat clipping at
    /// [`PipelineConfig::flat_threshold`].
    pub fn flat_step(
        &mut self,
        inputs: &Tensor,
        targets: &Targets,
        kind: LossKind,
        seed: u64,
        step: u64,
        workaround: Workaround,
    ) -> Result<PipelineStep> {
        self.run(
            inputs,
            targets,
            kind,
            seed,
            step,
            ClipMode::Flat(workaround),
        )
    }

    fn run(
        &mut self,
        inputs: &Tensor,
        targets: &Targets,
        kind: LossKind,
        seed: u64,
        step: u64,
        mode: ClipMode,
    ) -> Result<PipelineStep> {
        let k_n = self.devices.len();
        let batch = inputs.batch();
        let ranges = microbatch_ranges(batch, self.config.microbatches)?;
        let rpe = inputs.rows_per_example();
        let schedule = build_schedule(k_n, ranges.len(), mode, &self.config.costs)?;

        let flat_c = self.config.flat_threshold();
        for d in &mut self.devices {
            let std = match mode {
                ClipMode::PerDevice => device_noise_std(self.config.sigma, k_n, d.threshold),
                ClipMode::Flat(_) => self.config.sigma * flat_c,
            };
            d.init_accumulator(std, seed, step);
            d.store.clear();
        }

        let mut comm = CommLog {
            noise_additions: vec![1; k_n],
            busy: schedule.busy.clone(),
            makespan: schedule.makespan,
            ..CommLog::default()
        };
        // In-flight messages, keyed by (receiving device, microbatch).
        let mut activations: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        let mut gradients: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        let mut recompute_grads: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        // Flat mode: per-microbatch retained pairs and norm shares per device.
        let mut retained: BTreeMap<(usize, usize), GroupFactors> = BTreeMap::new();
        let mut shares: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        let mut flat_scales: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut unclipped = vec![0usize; k_n];
        let mut total_loss = 0.0;

        let mb_targets = |j: usize| targets.slice(ranges[j].start, ranges[j].end, rpe);
        let last = k_n - 1;

        for ev in &schedule.events {
            match (ev.stage, ev.device, ev.microbatch) {
                (Stage::Forward, Some(k), Some(j)) => {
                    let x = if k == 0 {
                        inputs.slice_batch(ranges[j].start, ranges[j].end)?
                    } else {
                        take(&mut activations, (k, j))?
                    };
                    let out = self.devices[k].local_forward(j, x)?;
                    if k < last {
                        activations.insert((k + 1, j), out);
                        comm.activation_messages += 1;
                    } else {
                        let (l, dlogits) = loss(&out, &mb_targets(j)?, kind)?;
                        total_loss += l * ranges[j].len() as f64;
                        gradients.insert((k, j), dlogits);
                    }
                }
                (Stage::Backward, Some(k), Some(j)) => {
                    let g = take(&mut gradients, (k, j))?;
                    let grad_in = match mode {
                        ClipMode::PerDevice => {
                            let (grad_in, count) = self.devices[k].local_backward(j, g)?;
                            unclipped[k] += count;
                            grad_in
                        }
                        ClipMode::Flat(w) => {
                            let dev = &mut self.devices[k];
                            if k == last && w == Workaround::Rematerialize {
                                recompute_grads.insert((k, j), g.clone());
                            }
                            let (pairs, grad_in) = dev.rematerialize_backward(j, g)?;
                            shares.entry(j).or_default().push(local_norms_sq(&pairs)?);
                            comm.norm_messages += 1;
                            // Rematerialization keeps the stored input for
                            // the second pass instead of the gradients.
                            if w != Workaround::Rematerialize {
                                dev.store.remove(&j);
                                retained.insert((k, j), pairs);
                            }
                            grad_in
                        }
                    };
                    if let Some(gi) = grad_in {
                        gradients.insert((k - 1, j), gi);
                        comm.gradient_messages += 1;
                    }
                }
                (Stage::Sync, None, Some(j)) => {
                    comm.syncs += 1;
                    let parts = shares.remove(&j).ok_or_else(|| {
                        Error::State(format!("sync for microbatch {j} before any norm shares"))
                    })?;
                    let n = ranges[j].len();
                    let norms: Vec<f64> = (0..n)
                        .map(|i| parts.iter().map(|p| p[i]).sum::<f64>().sqrt())
                        .collect();
                    let scales: Vec<f64> = norms.iter().map(|&v| clip_scale(v, flat_c)).collect();
                    let count = count_below(&norms, flat_c);
                    unclipped.iter_mut().for_each(|u| *u += count);
                    if mode == ClipMode::Flat(Workaround::Rematerialize) {
                        flat_scales.insert(j, scales);
                    } else {
                        for (k, d) in self.devices.iter_mut().enumerate() {
                            let pairs = take(&mut retained, (k, j))?;
                            d.accumulate(&pairs, &scales)?;
                        }
                    }
                }
                (Stage::Sync, None, None) => comm.syncs += 1,
                (Stage::Recompute, Some(k), Some(j)) => {
                    let g = take(&mut recompute_grads, (k, j))?;
                    let dev = &mut self.devices[k];
                    let (pairs, grad_in) = dev.rematerialize_backward(j, g)?;
                    dev.store.remove(&j);
                    let scales = flat_scales.get(&j).ok_or_else(|| {
                        Error::State(format!("recompute of microbatch {j} before its sync"))
                    })?;
                    dev.accumulate(&pairs, scales)?;
                    if let Some(gi) = grad_in {
                        recompute_grads.insert((k - 1, j), gi);
                        comm.gradient_messages += 1;
                    }
                }
                _ => return Err(Error::State(format!("malformed event {ev:?}"))),
            }
        }

        let scale = -self.config.lr / batch as f64;
        for d in &mut self.devices {
            let mut g = 0;
            for layer in &mut d.layers {
                if let Layer::Linear(lin) = layer {
                    let u = &d.accumulator[g];
                    if u.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "non-finite accumulator on device {} group {}",
                            d.id,
                            d.first_group + g
                        )));
                    }
                    let nw = lin.weight.len();
                    for (p, v) in lin.weight.data_mut().iter_mut().zip(&u[..nw]) {
                        *p += scale * v;
                    }
                    for (p, v) in lin.bias.data_mut().iter_mut().zip(&u[nw..]) {
                        *p += scale * v;
                    }
                    g += 1;
                }
            }
        }

        Ok(PipelineStep {
            comm,
            schedule,
            loss: total_loss / batch as f64,
            unclipped,
        })
    }
}

fn take<V>(map: &mut BTreeMap<(usize, usize), V>, key: (usize, usize)) -> Result<V> {
    map.remove(&key).ok_or_else(|| {
        Error::State(format!(
            "device {} has no pending message for microbatch {}",
            key.0, key.1
        ))
    })
}
