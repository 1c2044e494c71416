//! Per-step metrics, gradient-norm histograms and schedule traces as CSV.
//!
//! Column layouts (`K` = number of parameter groups, groups numbered from 1):
//!
//! * `metrics.csv`: `step, epoch, loss, accuracy, c_1..c_K,
//!   clipped_fraction_1..K, noise_std_1..K, wall_time_ms, peak_grad_bytes`.
//!   `accuracy` is test accuracy, filled on the last step of each epoch and
//!   empty elsewhere; `wall_time_ms` is 0 unless timing is enabled.
//! * `norms.csv`: `step, group, q05, q25, q50, q75, q85, q95`.
//! * trace CSVs: `event_index, virtual_time, device, microbatch, stage,
//!   message_type`, with empty cells for barrier events that belong to no
//!   device or microbatch.

use std::io::Write;

use groupclip_core::pipeline::Schedule;

use crate::error::Result;

/// Quantile levels recorded per group.
pub const NORM_QUANTILES: [f64; 6] = [0.05, 0.25, 0.50, 0.75, 0.85, 0.95];

/// Exact order-statistic quantile of sorted data.
///
/// With `h = p * n`: when `h` is a whole number the result is the mean of the
/// `h`-th and `(h+1)`-th smallest values, otherwise the `ceil(h)`-th. So the
/// median of `1..=100` is 50.5 and of `1..=5` is 3.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of no data");
    let h = p * n as f64;
    let lo = h.floor();
    if h - lo < 1e-9 {
        let i = lo as usize;
        match i {
            0 => sorted[0],
            i if i >= n => sorted[n - 1],
            i => 0.5 * (sorted[i - 1] + sorted[i]),
        }
    } else {
        sorted[(h.ceil() as usize).min(n) - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub thresholds: Vec<f64>,
    pub clipped_fraction: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub wall_time_ms: f64,
    pub peak_grad_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormHistogram {
    pub step: u64,
    /// 1-based group number.
    pub group: usize,
    pub quantiles: [f64; 6],
}

impl NormHistogram {
    pub fn from_norms(step: u64, group: usize, norms: &[f64]) -> NormHistogram {
        let mut s = norms.to_vec();
        s.sort_by(f64::total_cmp);
        NormHistogram {
            step,
            group,
            quantiles: NORM_QUANTILES.map(|p| quantile_sorted(&s, p)),
        }
    }
}

pub fn metrics_header(groups: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "loss", "accuracy"]
        .map(String::from)
        .to_vec();
    for prefix in ["c", "clipped_fraction", "noise_std"] {
        h.extend((1..=groups).map(|k| format!("{prefix}_{k}")));
    }
    h.push("wall_time_ms".into());
    h.push("peak_grad_bytes".into());
    h
}

pub const NORMS_HEADER: [&str; 8] = ["step", "group", "q05", "q25", "q50", "q75", "q85", "q95"];

pub const TRACE_HEADER: [&str; 6] = [
    "event_index",
    "virtual_time",
    "device",
    "microbatch",
    "stage",
    "message_type",
];

pub fn write_metrics<W: Write>(out: W, groups: usize, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(groups))?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ];
        for v in r
            .thresholds
            .iter()
            .chain(&r.clipped_fraction)
            .chain(&r.noise_std)
        {
            rec.push(v.to_string());
        }
        rec.push(r.wall_time_ms.to_string());
        rec.push(r.peak_grad_bytes.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_norms<W: Write>(out: W, rows: &[NormHistogram]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(NORMS_HEADER)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.group.to_string()];
        rec.extend(r.quantiles.iter().map(|q| q.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_trace<W: Write>(out: W, schedule: &Schedule) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    let opt = |v: Option<usize>| v.map(|d| d.to_string()).unwrap_or_default();
    for e in &schedule.events {
        w.write_record([
            e.index.to_string(),
            e.start.to_string(),
            opt(e.device),
            opt(e.microbatch),
            e.stage.as_str().to_string(),
            e.message.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
