use rand::Rng;
use rand_distr::StandardNormal;

use crate::clip::ParamGroup;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How gradient noise is spread across groups via the weights `gamma_k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseStrategy {
    /// `gamma_k = 1`: every coordinate gets the same noise.
    Global,
    /// `gamma_k = C_k`: each group spends the same privacy budget.
    EqualBudget,
    /// `gamma_k = C_k / sqrt(d_k)`: roughly equal per-coordinate SNR.
    EqualSnr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePlan {
    pub strategy: NoiseStrategy,
    /// `gamma_k`
    pub weights: Vec<f64>,
    /// `S = (sum_k C_k^2 / gamma_k^2)^(1/2)`
    pub sensitivity: f64,
    /// Per-coordinate std `s_k = sigma_new * S * gamma_k`.
    pub stds: Vec<f64>,
    /// Expected squared norm of the full noise vector, `sum_k s_k^2 d_k`.
    pub expected_sq_norm: f64,
}

impl NoisePlan {
    pub fn weight_for(strategy: NoiseStrategy, group: &ParamGroup) -> f64 {
        match strategy {
            NoiseStrategy::Global => 1.0,
            NoiseStrategy::EqualBudget => group.threshold,
            NoiseStrategy::EqualSnr => group.threshold / (group.size as f64).sqrt(),
        }
    }

    /// Noise for flat clipping at `threshold`: std `sigma * C` everywhere.
    pub fn flat(threshold: f64, sizes: &[usize], sigma: f64) -> Result<NoisePlan> {
        let std = if sigma == 0.0 {
            0.0
        } else if threshold.is_finite() {
            sigma * threshold
        } else {
            return Err(Error::Input(
                "noise needs a finite clipping threshold".into(),
            ));
        };
        Ok(NoisePlan {
            strategy: NoiseStrategy::Global,
            weights: vec![1.0; sizes.len()],
            sensitivity: threshold,
            stds: vec![std; sizes.len()],
            expected_sq_norm: std * std * sizes.iter().sum::<usize>() as f64,
        })
    }
}

pub fn make_noise_plan(
    strategy: NoiseStrategy,
    groups: &[ParamGroup],
    sigma_new: f64,
) -> Result<NoisePlan> {
    if !(sigma_new >= 0.0) {
        return Err(Error::Input(format!(
            "noise multiplier {sigma_new} must be >= 0"
        )));
    }
    let weights: Vec<f64> = groups
        .iter()
        .map(|g| NoisePlan::weight_for(strategy, g))
        .collect();
    if sigma_new == 0.0 {
        let sensitivity = if groups.iter().all(|g| g.threshold.is_finite()) {
            sensitivity(groups, &weights)
        } else {
            f64::INFINITY
        };
        return Ok(NoisePlan {
            strategy,
            weights,
            sensitivity,
            stds: vec![0.0; groups.len()],
            expected_sq_norm: 0.0,
        });
    }
    if let Some(g) = groups.iter().find(|g| !g.threshold.is_finite()) {
        return Err(Error::Input(format!(
            "noise needs finite thresholds; group {} is unclipped",
            g.index
        )));
    }
    let s = sensitivity(groups, &weights);
    let stds: Vec<f64> = weights.iter().map(|w| sigma_new * s * w).collect();
    let expected_sq_norm = stds
        .iter()
        .zip(groups)
        .map(|(sd, g)| sd * sd * g.size as f64)
        .sum();
    Ok(NoisePlan {
        strategy,
        weights,
        sensitivity: s,
        stds,
        expected_sq_norm,
    })
}

fn sensitivity(groups: &[ParamGroup], weights: &[f64]) -> f64 {
    groups
        .iter()
        .zip(weights)
        .map(|(g, w)| (g.threshold / w).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Fills `out` with independent `N(0, std^2)` draws; leaves zeros untouched
/// by the generator when `std == 0`.
pub fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64, out: &mut [f64]) {
    if std == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in out {
        let z: f64 = rng.sample(StandardNormal);
        *v = std * z;
    }
}

/// One noise vector per group, drawing group `k` from `rng_for(k)`.
pub fn draw_noise<R, F>(
    plan: &NoisePlan,
    groups: &[ParamGroup],
    mut rng_for: F,
) -> Result<Vec<Tensor>>
where
    R: Rng,
    F: FnMut(usize) -> R,
{
    if plan.stds.len() != groups.len() {
        return Err(Error::Input(format!(
            "noise plan covers {} groups, {} given",
            plan.stds.len(),
            groups.len()
        )));
    }
    groups
        .iter()
        .zip(&plan.stds)
        .map(|(g, &sd)| {
            let mut data = vec![0.0; g.size];
            if sd != 0.0 {
                fill_gaussian(&mut rng_for(g.index), sd, &mut data);
            }
            Tensor::vector(data)
        })
        .collect()
}
