use crate::error::{Error, Result};

/// Virtual-clock durations. Forward and backward are per stage per
/// microbatch; `rematerialize` is the extra forward a device runs before
/// each local backward, `offload` the CPU transfer of one microbatch's
/// per-example gradients, `sync` one all-device barrier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub forward: f64,
    pub backward: f64,
    pub rematerialize: f64,
    pub offload: f64,
    pub sync: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            forward: 1.0,
            backward: 2.0,
            rematerialize: 1.0,
            offload: 1.0,
            sync: 0.5,
        }
    }
}

impl CostModel {
    /// Unit forward and backward, no rematerialization.
    pub fn unit() -> Self {
        CostModel {
            forward: 1.0,
            backward: 1.0,
            rematerialize: 0.0,
            offload: 0.5,
            sync: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.forward, self.backward, self.sync];
        let nonneg = [self.rematerialize, self.offload];
        if positive.iter().all(|&c| c > 0.0 && c.is_finite())
            && nonneg.iter().all(|&c| c >= 0.0 && c.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cost model {self:?}")))
        }
    }
}

/// How flat clipping copes with per-example gradients that cannot be scaled
/// until every device has reported its share of the norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Workaround {
    /// Keep them on the device, which idles until the microbatch's sync.
    Retain,
    /// Move them to host memory after each backward.
    Offload,
    /// Drop them and rerun the backward once the scales are known.
    Rematerialize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    PerDevice,
    Flat(Workaround),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Forward,
    Backward,
    /// Second backward pass after the sync (rematerialize workaround).
    Recompute,
    Sync,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageType {
    None,
    /// Activations to the next device.
    Activation,
    /// Input gradients to the previous device.
    Gradient,
    /// Per-example norm shares to the barrier.
    Norms,
    /// Input gradients and norm shares.
    GradientAndNorms,
    Barrier,
}

impl MessageType {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageType::None => "none",
            MessageType::Activation => "activation",
            MessageType::Gradient => "gradient",
            MessageType::Norms => "norms",
            MessageType::GradientAndNorms => "gradient+norms",
            MessageType::Barrier => "barrier",
        }
    }
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Forward => "forward",
            Stage::Backward => "backward",
            Stage::Recompute => "recompute",
            Stage::Sync => "sync",
        }
    }
}

/// One scheduled unit of work. Syncs span all devices (`device` is `None`);
/// the final sync of per-device mode has no microbatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub device: Option<usize>,
    pub microbatch: Option<usize>,
    pub stage: Stage,
    pub message: MessageType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub devices: usize,
    pub microbatches: usize,
    pub mode: ClipMode,
    /// Totally ordered by `(start, device, microbatch)`, syncs after devices.
    pub events: Vec<Event>,
    pub makespan: f64,
    /// Busy virtual time per device.
    pub busy: Vec<f64>,
}

impl Schedule {
    /// End of the last forward, backward or recompute event.
    pub fn compute_span(&self) -> f64 {
        self.events
            .iter()
            .filter(|e| e.stage != Stage::Sync)
            .map(|e| e.end)
            .fold(0.0, f64::max)
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.events.iter().filter(|e| e.stage == stage).count()
    }
}

struct Task {
    device: Option<usize>,
    microbatch: Option<usize>,
    stage: Stage,
    message: MessageType,
    duration: f64,
    deps: Vec<usize>,
}

/// Event-driven GPipe schedule: every device runs all forwards in microbatch
/// order, then all backwards in reverse order, each stage waiting for its
/// neighbour's stage of the same microbatch.
pub fn build_schedule(
    devices: usize,
    microbatches: usize,
    mode: ClipMode,
    costs: &CostModel,
) -> Result<Schedule> {
    if devices == 0 || microbatches == 0 {
        return Err(Error::Config(format!(
            "need at least one device and one microbatch, got {devices} and {microbatches}"
        )));
    }
    costs.validate()?;
    let (k_n, j_n) = (devices, microbatches);
    let mut tasks: Vec<Task> = Vec::new();
    // queues[k] for devices, queues[K] for the barrier network
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); k_n + 1];
    let push = |tasks: &mut Vec<Task>, queues: &mut Vec<Vec<usize>>, t: Task| {
        let id = tasks.len();
        queues[t.device.unwrap_or(k_n)].push(id);
        tasks.push(t);
        id
    };

    let mut fwd = vec![vec![0; j_n]; k_n];
    for j in 0..j_n {
        for k in 0..k_n {
            let deps = if k > 0 { vec![fwd[k - 1][j]] } else { vec![] };
            fwd[k][j] = push(
                &mut tasks,
                &mut queues,
                Task {
                    device: Some(k),
                    microbatch: Some(j),
                    stage: Stage::Forward,
                    message: if k + 1 < k_n {
                        MessageType::Activation
                    } else {
                        MessageType::None
                    },
                    duration: costs.forward,
                    deps,
                },
            );
        }
    }

    let flat = matches!(mode, ClipMode::Flat(_));
    let mut bwd_duration = costs.backward + costs.rematerialize;
    if mode == ClipMode::Flat(Workaround::Offload) {
        bwd_duration += costs.offload;
    }
    let mut bwd = vec![vec![usize::MAX; j_n]; k_n];
    let mut syncs = vec![usize::MAX; j_n];
    // Tasks must enter device queues in execution order, so walk microbatches
    // J..1 and, within one, devices K..1. Retain makes each device's next
    // backward wait for the previous microbatch's sync.
    for j in (0..j_n).rev() {
        for k in (0..k_n).rev() {
            let mut deps = vec![if k + 1 < k_n {
                bwd[k + 1][j]
            } else {
                fwd[k][j]
            }];
            if mode == ClipMode::Flat(Workaround::Retain) && j + 1 < j_n {
                deps.push(syncs[j + 1]);
            }
            let message = match (flat, k > 0) {
                (false, true) => MessageType::Gradient,
                (false, false) => MessageType::None,
                (true, true) => MessageType::GradientAndNorms,
                (true, false) => MessageType::Norms,
            };
            bwd[k][j] = push(
                &mut tasks,
                &mut queues,
                Task {
                    device: Some(k),
                    microbatch: Some(j),
                    stage: Stage::Backward,
                    message,
                    duration: bwd_duration,
                    deps,
                },
            );
        }
        if flat {
            syncs[j] = push(
                &mut tasks,
                &mut queues,
                Task {
                    device: None,
                    microbatch: Some(j),
                    stage: Stage::Sync,
                    message: MessageType::Barrier,
                    duration: costs.sync,
                    deps: (0..k_n).map(|k| bwd[k][j]).collect(),
                },
            );
        }
    }

    match mode {
        ClipMode::PerDevice => {
            push(
                &mut tasks,
                &mut queues,
                Task {
                    device: None,
                    microbatch: None,
                    stage: Stage::Sync,
                    message: MessageType::Barrier,
                    duration: costs.sync,
                    deps: (0..k_n).map(|k| bwd[k][0]).collect(),
                },
            );
        }
        ClipMode::Flat(Workaround::Rematerialize) => {
            let mut rec = vec![vec![usize::MAX; j_n]; k_n];
            for j in (0..j_n).rev() {
                for k in (0..k_n).rev() {
                    let mut deps = vec![syncs[j]];
                    if k + 1 < k_n {
                        deps.push(rec[k + 1][j]);
                    }
                    rec[k][j] = push(
                        &mut tasks,
                        &mut queues,
                        Task {
                            device: Some(k),
                            microbatch: Some(j),
                            stage: Stage::Recompute,
                            message: if k > 0 {
                                MessageType::Gradient
                            } else {
                                MessageType::None
                            },
                            duration: costs.rematerialize + costs.backward,
                            deps,
                        },
                    );
                }
            }
        }
        ClipMode::Flat(_) => {}
    }

    simulate(k_n, j_n, mode, tasks, queues)
}

fn simulate(
    devices: usize,
    microbatches: usize,
    mode: ClipMode,
    tasks: Vec<Task>,
    queues: Vec<Vec<usize>>,
) -> Result<Schedule> {
    let mut end: Vec<Option<f64>> = vec![None; tasks.len()];
    let mut start = vec![0.0; tasks.len()];
    let mut heads = vec![0usize; queues.len()];
    let mut free = vec![0.0f64; queues.len()];
    let mut remaining = tasks.len();
    while remaining > 0 {
        let mut progressed = false;
        for (q, queue) in queues.iter().enumerate() {
            while let Some(&id) = queue.get(heads[q]) {
                let t = &tasks[id];
                let Some(ready) = t
                    .deps
                    .iter()
                    .map(|&d| end[d])
                    .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
                else {
                    break;
                };
                start[id] = ready.max(free[q]);
                let e = start[id] + t.duration;
                end[id] = Some(e);
                free[q] = e;
                heads[q] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::State("pipeline schedule deadlocked".into()));
        }
    }

    let mut busy = vec![0.0; devices];
    let mut events: Vec<Event> = tasks
        .iter()
        .enumerate()
        .map(|(id, t)| {
            if let Some(k) = t.device {
                busy[k] += t.duration;
            }
            Event {
                index: 0,
                start: start[id],
                end: end[id].unwrap_or(start[id]),
                device: t.device,
                microbatch: t.microbatch,
                stage: t.stage,
                message: t.message,
            }
        })
        .collect();
    events.sort_by(|a, b| {
        a.start
            .total_cmp(&b.start)
            .then(
                a.device
                    .unwrap_or(usize::MAX)
                    .cmp(&b.device.unwrap_or(usize::MAX)),
            )
            .then(
                a.microbatch
                    .unwrap_or(usize::MAX)
                    .cmp(&b.microbatch.unwrap_or(usize::MAX)),
            )
    });
    for (i, e) in events.iter_mut().enumerate() {
        e.index = i;
    }
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    Ok(Schedule {
        devices,
        microbatches,
        mode,
        events,
        makespan,
        busy,
    })
}
