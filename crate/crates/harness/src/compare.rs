//! Multi-seed accuracy comparison of clipping modes.
//!
//! Each (seed, mode) run is independent, so they are spread over a worker
//! pool; results come back in (seed, mode) order whatever the scheduling.

use std::path::Path;

use rayon::prelude::*;

use crate::config::{Mode, RunConfig};
use crate::error::{HarnessError, Result};
use crate::run::run;

/// Environment variable capping the number of worker threads.
pub const THREADS_VAR: &str = "GROUPCLIP_THREADS";

/// Worker count: `GROUPCLIP_THREADS` when set to a positive integer,
/// otherwise the available parallelism.
pub fn worker_threads() -> Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(HarnessError::Config(format!(
                "{THREADS_VAR} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(available),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    pub mode: Mode,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    /// Per-group median norm over the first and the last epoch (empty for
    /// non-private runs, which compute no per-example norms).
    pub first_epoch_medians: Vec<f64>,
    pub last_epoch_medians: Vec<f64>,
    pub final_thresholds: Vec<f64>,
}

/// Runs `base` under every mode for every seed on `threads` workers.
pub fn compare(
    base: &RunConfig,
    modes: &[Mode],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<CompareRow>> {
    base.validate()?;
    let jobs: Vec<(u64, Mode)> = seeds
        .iter()
        .flat_map(|&s| modes.iter().map(move |&m| (s, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, mode)| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.policy.mode = mode;
                let out = run(&cfg)?;
                Ok(CompareRow {
                    seed,
                    mode,
                    test_accuracy: out.test_accuracy,
                    train_accuracy: out.train_accuracy,
                    first_epoch_medians: out.epoch_medians.first().cloned().unwrap_or_default(),
                    last_epoch_medians: out.epoch_medians.last().cloned().unwrap_or_default(),
                    final_thresholds: out
                        .metrics
                        .last()
                        .map(|m| m.thresholds.clone())
                        .unwrap_or_default(),
                })
            })
            .collect()
    })
}

/// Mean test accuracy of `mode` over its rows.
pub fn mean_accuracy(rows: &[CompareRow], mode: Mode) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.mode == mode)
        .map(|r| r.test_accuracy)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Accuracy table in percent: one line per mode with per-seed values.
pub fn format_table(rows: &[CompareRow], modes: &[Mode]) -> String {
    let mut s = format!("{:<18} {:>8} {:>7}  per seed\n", "mode", "mean", "std");
    for &m in modes {
        let acc: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == m)
            .map(|r| 100.0 * r.test_accuracy)
            .collect();
        if acc.is_empty() {
            continue;
        }
        let per: Vec<String> = acc.iter().map(|a| format!("{a:.2}")).collect();
        s.push_str(&format!(
            "{:<18} {:>8.2} {:>7.2}  {}\n",
            m.as_str(),
            acc.iter().sum::<f64>() / acc.len() as f64,
            std_dev(&acc),
            per.join(" ")
        ));
    }
    s
}

pub fn write_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "seed",
        "mode",
        "test_accuracy",
        "train_accuracy",
        "group1_median_first_epoch",
        "group1_median_last_epoch",
    ])?;
    let first = |v: &[f64]| v.first().map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.mode.as_str().to_string(),
            r.test_accuracy.to_string(),
            r.train_accuracy.to_string(),
            first(&r.first_epoch_medians),
            first(&r.last_epoch_medians),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}
