//! Built-in run configurations.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::Result;

/// Source of the drift-task preset, also shipped as `configs/drift.toml`.
pub const DRIFT_TOML: &str = include_str!("../configs/drift.toml");

/// Non-private Gaussian-mixture baseline, shipped as `configs/baseline.toml`.
pub const BASELINE_TOML: &str = include_str!("../configs/baseline.toml");

/// Pipeline simulation preset, shipped as `configs/pipeline.toml`.
pub const PIPELINE_TOML: &str = include_str!("../configs/pipeline.toml");

/// The synthetic task on which per-layer norm scales drift apart during
/// training; used to compare clipping modes.
pub fn drift() -> Result<RunConfig> {
    RunConfig::from_toml(DRIFT_TOML, Path::new("configs/drift.toml"))
}

pub fn baseline() -> Result<RunConfig> {
    RunConfig::from_toml(BASELINE_TOML, Path::new("configs/baseline.toml"))
}

pub fn pipeline() -> Result<RunConfig> {
    RunConfig::from_toml(PIPELINE_TOML, Path::new("configs/pipeline.toml"))
}
