//! Private online estimation of a per-group gradient-norm quantile.
//!
//! Each group keeps its own threshold and moves it geometrically toward the
//! target quantile from a noisy count of unclipped examples. The noise draw is
//! supplied by the caller so the update itself is a pure function.

use crate::error::{Error, Result};

/// Number of norms at or below `threshold`.
pub fn count_below(norms: &[f64], threshold: f64) -> usize {
    norms.iter().filter(|&&n| n <= threshold).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileEstimator {
    threshold: f64,
    target_quantile: f64,
    lr: f64,
    count_noise: f64,
    batch_size: usize,
}

impl QuantileEstimator {
    pub fn new(
        threshold: f64,
        target_quantile: f64,
        lr: f64,
        count_noise: f64,
        batch_size: usize,
    ) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::Input(format!(
                "initial threshold {threshold} must be positive"
            )));
        }
        if !(target_quantile > 0.0 && target_quantile < 1.0) {
            return Err(Error::Input(format!(
                "target quantile {target_quantile} outside (0, 1)"
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::Input(format!(
                "quantile learning rate {lr} must be positive"
            )));
        }
        if !(count_noise >= 0.0) {
            return Err(Error::Input(format!(
                "count noise {count_noise} must be nonnegative"
            )));
        }
        if batch_size == 0 {
            return Err(Error::Input("nominal batch size must be positive".into()));
        }
        Ok(QuantileEstimator {
            threshold,
            target_quantile,
            lr,
            count_noise,
            batch_size,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn target_quantile(&self) -> f64 {
        self.target_quantile
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// `sigma_b`, the std of the caller's count-noise draw.
    pub fn count_noise(&self) -> f64 {
        self.count_noise
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Threshold after observing `unclipped` examples at or below the current
    /// threshold with count noise `z`: `C * exp(-eta * ((b + z) / B - q))`.
    pub fn next_threshold(&self, unclipped: usize, z: f64) -> f64 {
        let frac = (unclipped as f64 + z) / self.batch_size as f64;
        self.threshold * (-self.lr * (frac - self.target_quantile)).exp()
    }

    pub fn update(&mut self, unclipped: usize, z: f64) -> f64 {
        self.threshold = self.next_threshold(unclipped, z);
        self.threshold
    }
}
