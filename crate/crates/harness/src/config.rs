//! Run configuration documents.
//!
//! A run is described by one TOML document with a top-level `version` and
//! the sections `[task]`, `[model]`, `[policy]`, `[privacy]`,
//! `[optimizer]`, and optionally `[pipeline]` and `[telemetry]`. Unknown
//! keys are rejected, and [`RunConfig::validate`] runs before anything
//! else. A complete example:
//!
//! ```toml
//! version = 1
//! seed = 7
//!
//! [task]
//! kind = "drift"          # "gaussian-mixture" | "drift" | "idx"
//! train_size = 4000
//! test_size = 1000
//! dim = 24
//! classes = 4
//! separation = 3.0
//!
//! [model]
//! hidden = [32, 32, 32]
//! activation = "tanh"     # "relu" | "tanh"
//!
//! [policy]
//! mode = "adaptive-perlayer"   # "flat" | "fixed-perlayer" | "adaptive-perlayer" | "nonprivate"
//! threshold = 1.0              # flat C; per-layer modes start from C / sqrt(K)
//! target_quantile = 0.5
//! quantile_lr = 0.3
//! noise_strategy = "global"    # "global" | "equal-budget" | "equal-snr"
//!
//! [privacy]
//! epsilon = 3.0           # or `sigma = ...`, never both
//! delta = 1e-5
//! budget_fraction = 0.01  # or `sigma_b = ...`
//!
//! [optimizer]
//! rule = "sgd"            # "sgd" | "adam"
//! lr = 0.5
//! batch_size = 128
//! epochs = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    pub optimizer: OptimizerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineSection>,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GaussianMixture,
    Drift,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "defaults::train_size")]
    pub train_size: usize,
    #[serde(default = "defaults::test_size")]
    pub test_size: usize,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::separation")]
    pub separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationName {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input and output widths come from the task.
    pub hidden: Vec<usize>,
    pub activation: ActivationName,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub init_gains: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Flat,
    FixedPerlayer,
    AdaptivePerlayer,
    Nonprivate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Flat => "flat",
            Mode::FixedPerlayer => "fixed-perlayer",
            Mode::AdaptivePerlayer => "adaptive-perlayer",
            Mode::Nonprivate => "nonprivate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    Global,
    EqualBudget,
    EqualSnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: Mode,
    /// Global threshold `C`.
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    #[serde(default = "defaults::target_quantile")]
    pub target_quantile: f64,
    #[serde(default = "defaults::quantile_lr")]
    pub quantile_lr: f64,
    #[serde(default = "defaults::strategy")]
    pub noise_strategy: StrategyName,
    /// Starting adaptive thresholds; `C / sqrt(K)` each when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_thresholds: Option<Vec<f64>>,
    /// Rescale adaptive thresholds to joint norm `C` every step.
    #[serde(default)]
    pub equivalent_global: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_b: Option<f64>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            epsilon: None,
            delta: defaults::delta(),
            sigma: None,
            budget_fraction: None,
            sigma_b: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleName {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Poisson,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "defaults::rule")]
    pub rule: RuleName,
    pub lr: f64,
    /// Linear decay to this rate at the last step when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_final: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    pub batch_size: usize,
    #[serde(default = "defaults::sampling")]
    pub sampling: Sampling,
    pub epochs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub devices: usize,
    pub microbatches: usize,
    /// Per-device thresholds; one value is repeated for every device.
    pub thresholds: Vec<f64>,
    pub sigma: f64,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "defaults::sim_steps")]
    pub steps: u64,
    #[serde(default)]
    pub costs: CostSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub forward: f64,
    pub backward: f64,
    pub rematerialize: f64,
    pub offload: f64,
    pub sync: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        let c = groupclip_core::pipeline::CostModel::default();
        CostSection {
            forward: c.forward,
            backward: c.backward,
            rematerialize: c.rematerialize,
            offload: c.offload,
            sync: c.sync,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryConfig {
    /// Record measured clip time; off by default so artifacts are
    /// reproducible byte for byte.
    #[serde(default)]
    pub wall_time: bool,
    /// Emit a norm histogram every this many steps.
    #[serde(default = "defaults::norms_every")]
    pub norms_every: u64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig {
            wall_time: false,
            norms_every: defaults::norms_every(),
        }
    }
}

mod defaults {
    use super::*;

    pub fn train_size() -> usize {
        4000
    }
    pub fn test_size() -> usize {
        1000
    }
    pub fn dim() -> usize {
        24
    }
    pub fn classes() -> usize {
        4
    }
    pub fn separation() -> f64 {
        3.0
    }
    pub fn threshold() -> f64 {
        1.0
    }
    pub fn target_quantile() -> f64 {
        0.5
    }
    pub fn quantile_lr() -> f64 {
        0.3
    }
    pub fn strategy() -> StrategyName {
        StrategyName::Global
    }
    pub fn delta() -> f64 {
        1e-5
    }
    pub fn rule() -> RuleName {
        RuleName::Sgd
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn sampling() -> Sampling {
        Sampling::Poisson
    }
    pub fn sim_steps() -> u64 {
        1
    }
    pub fn norms_every() -> u64 {
        1
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Schema checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(bad(format!(
                "version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let t = &self.task;
        match t.kind {
            TaskKind::Idx => {
                for (name, p) in [
                    ("train_images", &t.train_images),
                    ("train_labels", &t.train_labels),
                    ("test_images", &t.test_images),
                    ("test_labels", &t.test_labels),
                ] {
                    if p.is_none() {
                        return Err(bad(format!("task.{name} is required for idx tasks")));
                    }
                }
            }
            _ => {
                if t.classes < 2 || t.dim < 2 || t.train_size == 0 || t.test_size == 0 {
                    return Err(bad(
                        "synthetic tasks need classes >= 2, dim >= 2 and nonempty splits",
                    ));
                }
                if !(t.separation >= 0.0 && t.separation.is_finite()) {
                    return Err(bad(format!(
                        "task.separation {} must be finite and >= 0",
                        t.separation
                    )));
                }
            }
        }

        let m = &self.model;
        if m.hidden.contains(&0) {
            return Err(bad("model.hidden widths must be positive"));
        }
        if !m.init_gains.is_empty() && m.init_gains.len() != m.hidden.len() + 1 {
            return Err(bad(format!(
                "model.init_gains has {} entries for {} Linear layers",
                m.init_gains.len(),
                m.hidden.len() + 1
            )));
        }

        let p = &self.policy;
        if !(p.threshold > 0.0 && p.threshold.is_finite()) {
            return Err(bad(format!(
                "policy.threshold {} must be positive",
                p.threshold
            )));
        }
        if !(p.target_quantile > 0.0 && p.target_quantile < 1.0) {
            return Err(bad(format!(
                "policy.target_quantile {} outside (0, 1)",
                p.target_quantile
            )));
        }
        if !(p.quantile_lr > 0.0) {
            return Err(bad(format!(
                "policy.quantile_lr {} must be positive",
                p.quantile_lr
            )));
        }
        if let Some(init) = &p.initial_thresholds {
            if init.len() != m.hidden.len() + 1 {
                return Err(bad(
                    "policy.initial_thresholds needs one value per Linear layer",
                ));
            }
        }

        let pr = &self.privacy;
        if p.mode != Mode::Nonprivate {
            match (pr.epsilon, pr.sigma) {
                (Some(_), Some(_)) => {
                    return Err(bad(
                        "give either privacy.epsilon or privacy.sigma, not both",
                    ))
                }
                (None, None) => {
                    return Err(bad("private modes need privacy.epsilon or privacy.sigma"))
                }
                (Some(e), None) if !(e > 0.0) => {
                    return Err(bad(format!("privacy.epsilon {e} must be positive")))
                }
                (None, Some(s)) if !(s > 0.0) => {
                    return Err(bad(format!("privacy.sigma {s} must be positive")))
                }
                _ => {}
            }
            if !(pr.delta > 0.0 && pr.delta < 1.0) {
                return Err(bad(format!("privacy.delta {} outside (0, 1)", pr.delta)));
            }
            if pr.budget_fraction.is_some() && pr.sigma_b.is_some() {
                return Err(bad(
                    "give either privacy.budget_fraction or privacy.sigma_b, not both",
                ));
            }
            if let Some(r) = pr.budget_fraction {
                if !(0.0..1.0).contains(&r) {
                    return Err(bad(format!("privacy.budget_fraction {r} outside [0, 1)")));
                }
            }
        }

        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.lr_final.is_some_and(|l| !(l > 0.0)) {
            return Err(bad("optimizer learning rates must be positive"));
        }
        if o.batch_size == 0 {
            return Err(bad("optimizer.batch_size must be positive"));
        }
        if !(o.momentum >= 0.0 && o.momentum < 1.0) {
            return Err(bad(format!(
                "optimizer.momentum {} outside [0, 1)",
                o.momentum
            )));
        }

        if let Some(pl) = &self.pipeline {
            if pl.devices == 0 || pl.microbatches == 0 || pl.batch_size == 0 {
                return Err(bad(
                    "pipeline devices, microbatches and batch_size must be positive",
                ));
            }
            if pl.thresholds.len() != 1 && pl.thresholds.len() != pl.devices {
                return Err(bad("pipeline.thresholds needs one value or one per device"));
            }
        }
        if self.telemetry.norms_every == 0 {
            return Err(bad("telemetry.norms_every must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
[task]
kind = "gaussian-mixture"
[model]
hidden = [8]
activation = "relu"
[policy]
mode = "flat"
[privacy]
sigma = 1.0
[optimizer]
lr = 0.1
batch_size = 16
epochs = 1
"#;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_toml(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_document_fills_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.policy.quantile_lr, 0.3);
        assert_eq!(c.task.classes, 4);
        assert_eq!(c.optimizer.sampling, Sampling::Poisson);
        assert_eq!(parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn schema_errors() {
        assert!(parse(&MINIMAL.replace("version = 1", "version = 2")).is_err());
        assert!(parse(&MINIMAL.replace("sigma = 1.0", "sigma = 1.0\nepsilon = 2.0")).is_err());
        assert!(parse(&MINIMAL.replace("sigma = 1.0", "")).is_err());
        assert!(parse(&MINIMAL.replace("lr = 0.1", "lr = 0.1\ncolour = 3")).is_err());
        assert!(parse(&MINIMAL.replace("\"flat\"", "\"sideways\"")).is_err());
        let np = MINIMAL
            .replace("\"flat\"", "\"nonprivate\"")
            .replace("sigma = 1.0", "");
        assert!(parse(&np).is_ok());
    }
}
