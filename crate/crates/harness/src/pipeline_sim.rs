//! Per-device versus flat clipping on the simulated pipeline.

use std::path::Path;

use groupclip_core::optim::evaluate;
use groupclip_core::pipeline::{
    balanced_partition, CostModel, Pipeline, PipelineConfig, PipelineStep, Schedule, Stage,
    Workaround,
};

use crate::config::{PipelineSection, RunConfig};
use crate::error::{HarnessError, Result};
use crate::run::{build_model, load_task};
use crate::telemetry::write_trace;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    PerDevice,
    Flat(Workaround),
}

impl SimMode {
    pub const ALL: [SimMode; 4] = [
        SimMode::PerDevice,
        SimMode::Flat(Workaround::Retain),
        SimMode::Flat(Workaround::Offload),
        SimMode::Flat(Workaround::Rematerialize),
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SimMode::PerDevice => "per-device",
            SimMode::Flat(Workaround::Retain) => "flat-retain",
            SimMode::Flat(Workaround::Offload) => "flat-offload",
            SimMode::Flat(Workaround::Rematerialize) => "flat-rematerialize",
        }
    }
}

/// Per-step communication and timing of one mode, plus where training ended.
#[derive(Clone, Debug)]
pub struct SimReport {
    pub mode: SimMode,
    pub steps: u64,
    pub makespan: f64,
    pub compute_span: f64,
    pub syncs: u64,
    pub norm_messages: u64,
    pub activation_messages: u64,
    pub gradient_messages: u64,
    /// Mean over devices of idle virtual time per step.
    pub mean_idle: f64,
    pub final_train_loss: f64,
    /// Trace of the last step (every step has the same schedule).
    pub schedule: Schedule,
}

pub fn pipeline_config(
    section: &PipelineSection,
    partition: Vec<std::ops::Range<usize>>,
) -> PipelineConfig {
    let devices = partition.len();
    let thresholds = if section.thresholds.len() == 1 {
        vec![section.thresholds[0]; devices]
    } else {
        section.thresholds.clone()
    };
    let c = &section.costs;
    PipelineConfig {
        partition,
        microbatches: section.microbatches,
        thresholds,
        sigma: section.sigma,
        lr: section.lr,
        costs: CostModel {
            forward: c.forward,
            backward: c.backward,
            rematerialize: c.rematerialize,
            offload: c.offload,
            sync: c.sync,
        },
    }
}

/// Trains `section.steps` minibatches in each mode from the same initial
/// model, taking consecutive slices of the training set.
pub fn simulate(cfg: &RunConfig, modes: &[SimMode]) -> Result<Vec<SimReport>> {
    cfg.validate()?;
    let section = cfg
        .pipeline
        .as_ref()
        .ok_or_else(|| HarnessError::Config("the config has no [pipeline] section".into()))?;
    let data = load_task(cfg)?;
    let model = build_model(cfg, &data)?;
    let n = data.train.len();
    let b = section.batch_size;
    if b > n {
        return Err(HarnessError::Config(format!(
            "pipeline batch of {b} from {n} examples"
        )));
    }
    let partition = balanced_partition(&model, section.devices)?;
    let pcfg = pipeline_config(section, partition);

    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut pipe = Pipeline::new(&model, pcfg.clone())?;
        let mut last: Option<PipelineStep> = None;
        let mut totals = [0u64; 4];
        for t in 0..section.steps {
            let start = (t as usize * b) % (n - b + 1);
            let (x, y) = data.train.range(start, start + b)?;
            let s = match mode {
                SimMode::PerDevice => pipe.step(&x, &y, data.train.kind, cfg.seed, t)?,
                SimMode::Flat(w) => pipe.flat_step(&x, &y, data.train.kind, cfg.seed, t, w)?,
            };
            totals[0] += s.comm.syncs;
            totals[1] += s.comm.norm_messages;
            totals[2] += s.comm.activation_messages;
            totals[3] += s.comm.gradient_messages;
            last = Some(s);
        }
        let last =
            last.ok_or_else(|| HarnessError::Config("pipeline.steps must be positive".into()))?;
        let steps = section.steps;
        let comm = &last.comm;
        let devices = comm.busy.len();
        let final_model = pipe.model()?;
        reports.push(SimReport {
            mode,
            steps,
            makespan: comm.makespan,
            compute_span: last.schedule.compute_span(),
            syncs: totals[0] / steps,
            norm_messages: totals[1] / steps,
            activation_messages: totals[2] / steps,
            gradient_messages: totals[3] / steps,
            mean_idle: (0..devices).map(|d| comm.idle(d)).sum::<f64>() / devices as f64,
            final_train_loss: evaluate(&final_model, &data.train)?.0,
            schedule: last.schedule,
        });
    }
    Ok(reports)
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "mode",
    "steps",
    "makespan",
    "compute_span",
    "syncs_per_step",
    "norm_messages_per_step",
    "activation_messages_per_step",
    "gradient_messages_per_step",
    "mean_idle",
    "final_train_loss",
];

pub fn format_table(reports: &[SimReport]) -> String {
    let mut s = format!(
        "{:<20} {:>9} {:>9} {:>6} {:>6} {:>9} {:>11}\n",
        "mode", "makespan", "idle", "syncs", "norms", "recompute", "train_loss"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<20} {:>9.2} {:>9.2} {:>6} {:>6} {:>9} {:>11.4}\n",
            r.mode.as_str(),
            r.makespan,
            r.mean_idle,
            r.syncs,
            r.norm_messages,
            r.schedule.count(Stage::Recompute),
            r.final_train_loss
        ));
    }
    s
}

/// Writes `commlog.csv` (the per-device trace), `commlog_<mode>.csv` for
/// the flat modes and `pipeline_summary.csv`.
pub fn write_reports(reports: &[SimReport], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for r in reports {
        let name = match r.mode {
            SimMode::PerDevice => "commlog.csv".to_string(),
            m => format!("commlog_{}.csv", m.as_str()),
        };
        let path = dir.join(name);
        let f = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        write_trace(std::io::BufWriter::new(f), &r.schedule)?;
    }
    let path = dir.join("pipeline_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in reports {
        w.write_record([
            r.mode.as_str().to_string(),
            r.steps.to_string(),
            r.makespan.to_string(),
            r.compute_span.to_string(),
            r.syncs.to_string(),
            r.norm_messages.to_string(),
            r.activation_messages.to_string(),
            r.gradient_messages.to_string(),
            r.mean_idle.to_string(),
            r.final_train_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    Ok(())
}
