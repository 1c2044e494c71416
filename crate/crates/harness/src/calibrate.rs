//! Noise calibration summaries for the `calibrate` command.

use groupclip_core::privacy::{epsilon_for, PrivacySpec};

use crate::error::{HarnessError, Result};
use crate::run::steps_per_epoch;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrateRequest {
    pub epsilon: f64,
    pub delta: f64,
    /// Sampling rate `B / N`.
    pub rate: f64,
    pub steps: u64,
    /// Number of clip counts released per step.
    pub groups: usize,
    pub budget_fraction: f64,
}

impl CalibrateRequest {
    /// Steps for `epochs` passes at `rate`, rounding steps per epoch as
    /// training runs do.
    pub fn steps_for_epochs(rate: f64, epochs: u64) -> Result<u64> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(HarnessError::Config(format!(
                "sampling rate {rate} outside (0, 1]"
            )));
        }
        // `steps_per_epoch` works on N and B; only their ratio matters.
        let per_epoch = steps_per_epoch(1_000_000, (rate * 1e6).round().max(1.0) as usize);
        Ok(epochs * per_epoch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub spec: PrivacySpec,
    /// Epsilon actually accounted at the calibrated `sigma` (at most the
    /// target, up to the calibration tolerance).
    pub achieved_epsilon: f64,
}

pub fn calibrate(req: &CalibrateRequest) -> Result<Calibration> {
    let spec = PrivacySpec::calibrate(
        req.epsilon,
        req.delta,
        req.rate,
        req.steps,
        req.budget_fraction,
        req.groups,
    )?;
    let achieved_epsilon = epsilon_for(spec.sigma, req.rate, req.steps, req.delta)?;
    Ok(Calibration {
        spec,
        achieved_epsilon,
    })
}

pub fn format_calibration(req: &CalibrateRequest, c: &Calibration) -> String {
    let s = &c.spec;
    format!(
        "epsilon   {}\ndelta     {}\nrate      {}\nsteps     {}\ngroups    {}\n\
         sigma     {:.6}\nsigma_new {:.6}\nsigma_b   {:.6}\nr         {}\n\
         accounted epsilon at sigma: {:.6}\n",
        req.epsilon,
        req.delta,
        req.rate,
        req.steps,
        req.groups,
        s.sigma,
        s.sigma_new,
        s.sigma_b,
        s.budget_fraction,
        c.achieved_epsilon
    )
}
