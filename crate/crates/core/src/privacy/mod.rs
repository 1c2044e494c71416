//! Privacy accounting and noise planning.
//!
//! Gradients and the per-group clip counts are released together as one
//! heterogeneous Gaussian mechanism. Each count has sensitivity 1/2 and noise
//! std `sigma_b`, so the gradient multiplier must shrink to `sigma_new` with
//! `1/sigma_new^2 + K/(4 sigma_b^2) = 1/sigma^2`, after which the whole run
//! is accounted once at `sigma`.

mod noise;
mod rdp;

pub use noise::{draw_noise, fill_gaussian, make_noise_plan, NoisePlan, NoiseStrategy};
pub use rdp::{
    calibrate_sigma, eps_from_rdp, epsilon_for, rdp_sgm, RdpCurve, DEFAULT_ORDERS, SIGMA_LOWER,
    SIGMA_TOLERANCE, SIGMA_UPPER,
};

use crate::error::{Error, Result};

/// Gradient noise multiplier left after `K` clip counts take their share:
/// `(sigma^-2 - K / (4 sigma_b^2))^(-1/2)`.
pub fn split_budget(sigma: f64, sigma_b: f64, groups: usize) -> Result<f64> {
    if !(sigma > 0.0 && sigma_b > 0.0) {
        return Err(Error::Input(format!(
            "noise multipliers must be positive (sigma = {sigma}, sigma_b = {sigma_b})"
        )));
    }
    let rest = sigma.powi(-2) - groups as f64 / (4.0 * sigma_b * sigma_b);
    if !(rest > 0.0) {
        let min = sigma * (groups as f64).sqrt() / 2.0;
        return Err(Error::Infeasible(format!(
            "count noise sigma_b = {sigma_b} leaves no budget for gradients; \
             need sigma_b > {min} for {groups} groups at sigma = {sigma}"
        )));
    }
    Ok(rest.powf(-0.5))
}

/// Share of the budget spent on clip counts: `K sigma^2 / (4 sigma_b^2)`.
pub fn budget_fraction(sigma: f64, sigma_b: f64, groups: usize) -> f64 {
    groups as f64 * sigma * sigma / (4.0 * sigma_b * sigma_b)
}

/// Inverse of [`budget_fraction`]: `sqrt(K sigma^2 / (4 r))`.
pub fn sigma_b_for_fraction(fraction: f64, sigma: f64, groups: usize) -> Result<f64> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!(
            "budget fraction {fraction} outside (0, 1)"
        )));
    }
    Ok((groups as f64 * sigma * sigma / (4.0 * fraction)).sqrt())
}

/// A resolved privacy configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    /// Sampling rate `B / N`.
    pub rate: f64,
    pub steps: u64,
    /// Share `r` of the budget given to clip counts.
    pub budget_fraction: f64,
    pub sigma: f64,
    /// Count noise std; infinite when no counts are released.
    pub sigma_b: f64,
    pub sigma_new: f64,
}

impl PrivacySpec {
    /// Calibrates `sigma` for `(epsilon, delta)` and splits off a fraction
    /// `r` for `groups` clip counts (`r = 0` releases none).
    pub fn calibrate(
        epsilon: f64,
        delta: f64,
        rate: f64,
        steps: u64,
        fraction: f64,
        groups: usize,
    ) -> Result<PrivacySpec> {
        check_common(delta, rate, steps)?;
        let sigma = calibrate_sigma(epsilon, delta, rate, steps)?;
        Self::split(epsilon, delta, rate, steps, sigma, fraction, groups)
    }

    /// Uses a given `sigma`; `epsilon` is the accounted value at that `sigma`.
    pub fn from_sigma(
        sigma: f64,
        delta: f64,
        rate: f64,
        steps: u64,
        fraction: f64,
        groups: usize,
    ) -> Result<PrivacySpec> {
        check_common(delta, rate, steps)?;
        if !(sigma > 0.0) {
            return Err(Error::Input(format!(
                "noise multiplier {sigma} must be positive"
            )));
        }
        let epsilon = epsilon_for(sigma, rate, steps, delta)?;
        Self::split(epsilon, delta, rate, steps, sigma, fraction, groups)
    }

    /// No noise anywhere; `epsilon` is infinite.
    pub fn nonprivate(rate: f64, steps: u64) -> PrivacySpec {
        PrivacySpec {
            epsilon: f64::INFINITY,
            delta: 0.0,
            rate,
            steps,
            budget_fraction: 0.0,
            sigma: 0.0,
            sigma_b: 0.0,
            sigma_new: 0.0,
        }
    }

    fn split(
        epsilon: f64,
        delta: f64,
        rate: f64,
        steps: u64,
        sigma: f64,
        fraction: f64,
        groups: usize,
    ) -> Result<PrivacySpec> {
        let (sigma_b, sigma_new) = if fraction == 0.0 || groups == 0 {
            (f64::INFINITY, sigma)
        } else {
            let sigma_b = sigma_b_for_fraction(fraction, sigma, groups)?;
            (sigma_b, split_budget(sigma, sigma_b, groups)?)
        };
        Ok(PrivacySpec {
            epsilon,
            delta,
            rate,
            steps,
            budget_fraction: fraction,
            sigma,
            sigma_b,
            sigma_new,
        })
    }

    /// Std of one clip-count draw (zero when counts are noiseless or unused).
    pub fn count_std(&self) -> f64 {
        if self.sigma_b.is_finite() {
            self.sigma_b
        } else {
            0.0
        }
    }
}

fn check_common(delta: f64, rate: f64, steps: u64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta {delta} outside (0, 1)")));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Input(format!("sampling rate {rate} outside (0, 1]")));
    }
    if steps == 0 {
        return Err(Error::Input("at least one step is required".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let s = split_budget(1.0, 10.0, 4).unwrap();
        assert!((s - 0.99f64.powf(-0.5)).abs() < 1e-15);
        assert!((s - 1.005038).abs() < 1e-6);
        assert!((split_budget(1.3, 1e9, 8).unwrap() - 1.3).abs() < 1e-12);
        let err = split_budget(1.0, 1.0, 4).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        assert!(err.to_string().contains("sigma_b > 1"));
    }

    #[test]
    fn fraction_examples() {
        assert_eq!(budget_fraction(1.0, 10.0, 4), 0.01);
        assert_eq!(budget_fraction(1.0, 10.0, 0), 0.0);
        let sb = sigma_b_for_fraction(0.1, 1.0, 16).unwrap();
        assert!((sb - 40f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spec_split_conserves_budget() {
        let p = PrivacySpec::from_sigma(1.2, 1e-5, 0.01, 500, 0.01, 4).unwrap();
        let lhs = p.sigma_new.powi(-2) + 4.0 / (4.0 * p.sigma_b * p.sigma_b);
        assert!((lhs * p.sigma * p.sigma - 1.0).abs() < 1e-12);
        let none = PrivacySpec::from_sigma(1.2, 1e-5, 0.01, 500, 0.0, 4).unwrap();
        assert_eq!(none.sigma_new, 1.2);
        assert_eq!(none.count_std(), 0.0);
    }
}
