//! The `groupclip` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchConfig, BenchMode};
use crate::calibrate::{calibrate, format_calibration, CalibrateRequest};
use crate::compare::{self, worker_threads};
use crate::config::{Mode, RunConfig};
use crate::error::{HarnessError, Result};
use crate::pipeline_sim::{self, SimMode};
use crate::presets;
use crate::run::{run, write_artifacts};

#[derive(Debug, Parser)]
#[command(
    name = "groupclip",
    version,
    about = "Private training with group-wise gradient clipping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Noise multipliers for a privacy target and clip-count budget share.
    Calibrate(CalibrateArgs),
    /// Train from a config file and write metrics, norms and a checkpoint.
    Train(TrainArgs),
    /// Per-step time and gradient memory of the clipping modes.
    Bench(BenchArgs),
    /// Per-device versus flat clipping on the simulated pipeline.
    PipelineSim(PipelineArgs),
    /// Test accuracy of several clipping modes over several seeds.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    /// Sampling rate B/N.
    #[arg(long, conflicts_with = "batch_size")]
    rate: Option<f64>,
    #[arg(long, requires = "dataset_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long, conflicts_with = "epochs")]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Number of clipping groups K.
    #[arg(long, default_value_t = 1)]
    groups: usize,
    /// Share r of the budget spent on clip counts.
    #[arg(long, default_value_t = 0.01)]
    budget_fraction: f64,
}

/// Overrides applied on top of a config document.
#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    target_quantile: Option<f64>,
    /// Quantile learning rate [config default: 0.3].
    #[arg(long)]
    quantile_lr: Option<f64>,
    /// Share of the budget spent on clip counts [config default: 0.01].
    #[arg(long)]
    budget_fraction: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(m) = self.mode {
            cfg.policy.mode = m;
        }
        if let Some(e) = self.epsilon {
            cfg.privacy.epsilon = Some(e);
            cfg.privacy.sigma = None;
        }
        if let Some(d) = self.delta {
            cfg.privacy.delta = d;
        }
        if let Some(q) = self.target_quantile {
            cfg.policy.target_quantile = q;
        }
        if let Some(l) = self.quantile_lr {
            cfg.policy.quantile_lr = l;
        }
        if let Some(r) = self.budget_fraction {
            cfg.privacy.budget_fraction = Some(r);
            cfg.privacy.sigma_b = None;
        }
        cfg.validate()
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Layer widths from input to output.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 512, 512, 512, 10])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write bench.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Config with a [pipeline] section; the built-in preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Base config; the built-in drift task when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds, counting up from the config's seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_values_t = [Mode::AdaptivePerlayer, Mode::FixedPerlayer, Mode::Flat]
    )]
    modes: Vec<Mode>,
    #[command(flatten)]
    overrides: Overrides,
}

fn load_or(path: &Option<PathBuf>, preset: fn() -> Result<RunConfig>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => preset(),
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<String> {
    let rate = match (a.rate, a.batch_size, a.dataset_size) {
        (Some(r), _, _) => r,
        (None, Some(b), Some(n)) if n > 0 => b as f64 / n as f64,
        _ => {
            return Err(HarnessError::Config(
                "give --rate or both --batch-size and --dataset-size".into(),
            ))
        }
    };
    let steps = match (a.steps, a.epochs) {
        (Some(t), _) => t,
        (None, Some(e)) => CalibrateRequest::steps_for_epochs(rate, e)?,
        _ => return Err(HarnessError::Config("give --steps or --epochs".into())),
    };
    let req = CalibrateRequest {
        epsilon: a.epsilon,
        delta: a.delta,
        rate,
        steps,
        groups: a.groups,
        budget_fraction: a.budget_fraction,
    };
    Ok(format_calibration(&req, &calibrate(&req)?))
}

fn cmd_train(a: &TrainArgs) -> Result<String> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.overrides.apply(&mut cfg)?;
    let out = run(&cfg)?;
    let dir = out_dir(&cfg);
    write_artifacts(&out, &cfg, &dir)?;
    Ok(format!(
        "mode {} seed {}: {} steps, sigma {:.4}, epsilon {:.4}\n\
         train accuracy {:.4}, test accuracy {:.4}\nwrote {}\n",
        cfg.policy.mode.as_str(),
        cfg.seed,
        out.metrics.len(),
        out.spec.sigma,
        out.spec.epsilon,
        out.train_accuracy,
        out.test_accuracy,
        dir.display()
    ))
}

fn cmd_bench(a: &BenchArgs) -> Result<String> {
    let cfg = BenchConfig {
        widths: a.widths.clone(),
        batch_size: a.batch_size,
        warmup: a.warmup,
        steps: a.steps,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let rows = bench::bench(&cfg, &BenchMode::ALL)?;
    if let Some(dir) = &a.out {
        write_bench_csv(&rows, dir)?;
    }
    Ok(bench::format_table(&cfg, &rows))
}

fn write_bench_csv(rows: &[bench::BenchRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("bench.csv"))?;
    w.write_record(["mode", "median_ms", "peak_grad_bytes"])?;
    for r in rows {
        w.write_record([
            r.mode.as_str().to_string(),
            r.median_ms().to_string(),
            r.peak_grad_bytes.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(dir, e))?;
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<String> {
    let mut cfg = load_or(&a.config, presets::pipeline)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let reports = pipeline_sim::simulate(&cfg, &SimMode::ALL)?;
    pipeline_sim::write_reports(&reports, &a.out)?;
    Ok(format!(
        "{}wrote {}\n",
        pipeline_sim::format_table(&reports),
        a.out.display()
    ))
}

fn cmd_compare(a: &CompareArgs) -> Result<String> {
    let mut cfg = load_or(&a.config, presets::drift)?;
    a.overrides.apply(&mut cfg)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.seed + i).collect();
    let rows = compare::compare(&cfg, &a.modes, &seeds, worker_threads()?)?;
    let mut text = compare::format_table(&rows, &a.modes);
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let path = dir.join("compare.csv");
        compare::write_csv(&rows, &path)?;
        text.push_str(&format!("wrote {}\n", path.display()));
    }
    Ok(text)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on errors, 2 on usage errors.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::PipelineSim(a) => cmd_pipeline(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
