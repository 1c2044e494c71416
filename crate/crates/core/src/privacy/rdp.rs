use crate::error::{Error, Result};

/// Integer Renyi orders used by default.
pub const DEFAULT_ORDERS: std::ops::RangeInclusive<u32> = 2..=64;

/// Bisection bounds and tolerance for [`calibrate_sigma`].
pub const SIGMA_LOWER: f64 = 0.3;
pub const SIGMA_UPPER: f64 = 50.0;
pub const SIGMA_TOLERANCE: f64 = 1e-3;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP of one step of the Poisson-subsampled Gaussian mechanism at integer
/// order `alpha`, noise multiplier `sigma` and sampling rate `rho`:
///
/// `1/(alpha-1) * ln sum_j binom(alpha, j) (1-rho)^(alpha-j) rho^j exp(j(j-1) / (2 sigma^2))`
///
/// The sum is accumulated in log space.
pub fn rdp_sgm(alpha: u32, sigma: f64, rho: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(Error::Input(format!("Renyi order {alpha} must be >= 2")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Input(format!(
            "noise multiplier {sigma} must be positive"
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Input(format!("sampling rate {rho} outside [0, 1]")));
    }
    let a = alpha as f64;
    if rho == 0.0 {
        return Ok(0.0);
    }
    if rho == 1.0 {
        let v = a / (2.0 * sigma * sigma);
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "RDP overflow at order {alpha}, sigma {sigma}"
            )));
        }
        return Ok(v);
    }
    let (ln_p, ln_q) = (rho.ln(), (-rho).ln_1p());
    let mut ln_binom = 0.0f64;
    let mut acc = f64::NEG_INFINITY;
    for j in 0..=alpha {
        if j > 0 {
            ln_binom += ((alpha - j + 1) as f64).ln() - (j as f64).ln();
        }
        let jf = j as f64;
        let term = ln_binom + (a - jf) * ln_q + jf * ln_p + jf * (jf - 1.0) / (2.0 * sigma * sigma);
        if term.is_nan() || term == f64::INFINITY {
            return Err(Error::Numeric(format!(
                "RDP overflow at order {alpha}, sigma {sigma}, rate {rho}"
            )));
        }
        acc = log_add(acc, term);
    }
    let v = acc / (a - 1.0);
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "RDP overflow at order {alpha}, sigma {sigma}, rate {rho}"
        )));
    }
    // Round-off can push tiny values just below zero.
    Ok(v.max(0.0))
}

/// Per-step RDP values over a grid of integer orders.
#[derive(Clone, Debug, PartialEq)]
pub struct RdpCurve {
    pub orders: Vec<u32>,
    pub values: Vec<f64>,
}

impl RdpCurve {
    pub fn sampled_gaussian(
        sigma: f64,
        rho: f64,
        orders: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let orders: Vec<u32> = orders.into_iter().collect();
        let values = orders
            .iter()
            .map(|&a| rdp_sgm(a, sigma, rho))
            .collect::<Result<Vec<_>>>()?;
        Ok(RdpCurve { orders, values })
    }
}

/// `min_alpha T * rdp(alpha) + ln(1/delta) / (alpha - 1)`.
pub fn eps_from_rdp(curve: &RdpCurve, steps: u64, delta: f64) -> Result<f64> {
    if curve.orders.is_empty() || curve.orders.len() != curve.values.len() {
        return Err(Error::Input("RDP curve has no orders".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!("delta {delta} outside (0, 1)")));
    }
    if steps == 0 {
        return Ok(0.0);
    }
    let log_inv_delta = -delta.ln();
    Ok(curve
        .orders
        .iter()
        .zip(&curve.values)
        .map(|(&a, &v)| steps as f64 * v + log_inv_delta / (a as f64 - 1.0))
        .fold(f64::INFINITY, f64::min))
}

/// Epsilon spent after `steps` steps at `(sigma, rho)` on the default grid.
pub fn epsilon_for(sigma: f64, rho: f64, steps: u64, delta: f64) -> Result<f64> {
    eps_from_rdp(
        &RdpCurve::sampled_gaussian(sigma, rho, DEFAULT_ORDERS)?,
        steps,
        delta,
    )
}

/// Smallest noise multiplier (to within [`SIGMA_TOLERANCE`]) in
/// `[SIGMA_LOWER, SIGMA_UPPER]` whose accounted epsilon does not exceed
/// `epsilon`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, rho: f64, steps: u64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon {epsilon} must be positive")));
    }
    let eps_at = |s: f64| epsilon_for(s, rho, steps, delta);
    if eps_at(SIGMA_LOWER)? <= epsilon {
        return Ok(SIGMA_LOWER);
    }
    let at_upper = eps_at(SIGMA_UPPER)?;
    if at_upper > epsilon {
        let floor = -delta.ln() / (*DEFAULT_ORDERS.end() as f64 - 1.0);
        return Err(Error::Infeasible(format!(
            "epsilon {epsilon} is unreachable: even sigma = {SIGMA_UPPER} spends {at_upper:.4} \
             (the order grid alone costs ln(1/delta)/63 = {floor:.4} at delta = {delta})"
        )));
    }
    let (mut lo, mut hi) = (SIGMA_LOWER, SIGMA_UPPER);
    while hi - lo > SIGMA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
