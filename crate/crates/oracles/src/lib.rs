//! Reference computations for tests.
//!
//! Everything here is deliberately computed along a different route than the
//! library code it checks: numerical differentiation instead of backprop,
//! quadrature instead of the binomial RDP series, tick-by-tick simulation
//! instead of the event-driven pipeline schedule.

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn ln_ratio(u: f64, rho: f64) -> f64 {
    // ln((1 - rho) + rho * e^u)
    if u > 30.0 {
        u + rho.ln() + ((1.0 - rho) / rho * (-u).exp()).ln_1p()
    } else {
        (rho * u.exp_m1()).ln_1p()
    }
}

/// Renyi divergence of order `alpha` between the sampled Gaussian mixture
/// `(1-rho) N(0, s^2) + rho N(1, s^2)` and `N(0, s^2)`, by direct quadrature
/// of `E_{N(0,s^2)}[(mixture density / base density)^alpha]`.
///
/// Integrates `E[ratio^alpha] - 1` to keep relative accuracy when the
/// divergence is tiny.
pub fn sampled_gaussian_rdp_quadrature(alpha: f64, sigma: f64, rho: f64) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    let s2 = sigma * sigma;
    let lo = -40.0 * sigma;
    let hi = alpha + 40.0 * sigma + 1.0;
    let h = sigma / 200.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let h = (hi - lo) / n as f64;
    let log_norm = -(2.0 * std::f64::consts::PI * s2).sqrt().ln();
    // Neumaier-compensated Simpson sum.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for i in 0..=n {
        let z = lo + i as f64 * h;
        let log_mu0 = log_norm - z * z / (2.0 * s2);
        let u = (2.0 * z - 1.0) / (2.0 * s2);
        let g = alpha * ln_ratio(u, rho);
        let term = if g > 30.0 {
            (log_mu0 + g).exp()
        } else {
            log_mu0.exp() * g.exp_m1()
        };
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let v = w * term;
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    let a_minus_one = (sum + comp) * h / 3.0;
    a_minus_one.ln_1p() / (alpha - 1.0)
}

/// `(epsilon, delta)` from `steps` compositions, using quadrature RDP at every
/// integer order in `orders`.
pub fn epsilon_by_quadrature(
    sigma: f64,
    rho: f64,
    steps: u64,
    delta: f64,
    orders: std::ops::RangeInclusive<u32>,
) -> f64 {
    orders
        .map(|a| {
            let a = a as f64;
            steps as f64 * sampled_gaussian_rdp_quadrature(a, sigma, rho)
                + (1.0 / delta).ln() / (a - 1.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Smallest noise multiplier in `[lo, hi]` reaching `target_eps`, by a linear
/// scan with step `step` over the quadrature accountant.
pub fn sigma_by_scan(
    target_eps: f64,
    rho: f64,
    steps: u64,
    delta: f64,
    (lo, hi, step): (f64, f64, f64),
) -> Option<f64> {
    let mut s = lo;
    while s <= hi {
        if epsilon_by_quadrature(s, rho, steps, delta, 2..=64) <= target_eps {
            return Some(s);
        }
        s += step;
    }
    None
}

/// Makespan of a GPipe schedule (all forwards, then all backwards in reverse
/// microbatch order) with unit-cost stages, found by advancing a global clock
/// one tick at a time and letting every idle device start its next stage if
/// its dependency has finished.
pub fn gpipe_makespan_by_ticks(devices: usize, microbatches: usize) -> u64 {
    #[derive(Clone, Copy, PartialEq)]
    enum Stage {
        Fwd(usize),
        Bwd(usize),
    }
    let program: Vec<Stage> = (0..microbatches)
        .map(Stage::Fwd)
        .chain((0..microbatches).rev().map(Stage::Bwd))
        .collect();
    // finish[d][s] = tick at which stage s of device d finished
    let mut finish = vec![vec![None::<u64>; program.len()]; devices];
    let mut next = vec![0usize; devices];
    let mut busy_until = vec![0u64; devices];
    let mut tick = 0u64;
    loop {
        if next.iter().all(|&n| n == program.len()) && busy_until.iter().all(|&b| b <= tick) {
            return tick;
        }
        for d in 0..devices {
            if busy_until[d] > tick || next[d] == program.len() {
                continue;
            }
            let stage = program[next[d]];
            let dep_done = match stage {
                Stage::Fwd(j) => d == 0 || finish[d - 1][j].is_some_and(|t| t <= tick),
                Stage::Bwd(j) => {
                    let own_fwd = finish[d][j].is_some_and(|t| t <= tick);
                    let downstream = if d + 1 == devices {
                        true
                    } else {
                        let idx = microbatches + (microbatches - 1 - j);
                        finish[d + 1][idx].is_some_and(|t| t <= tick)
                    };
                    own_fwd && downstream
                }
            };
            if dep_done {
                let idx = next[d];
                finish[d][idx] = Some(tick + 1);
                busy_until[d] = tick + 1;
                next[d] += 1;
            }
        }
        tick += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_matches_pure_gaussian() {
        // rho = 1 collapses to the Gaussian mechanism: alpha / (2 sigma^2)
        for &(a, s) in &[(2.0, 1.0), (8.0, 2.0), (5.0, 0.8)] {
            let q = sampled_gaussian_rdp_quadrature(a, s, 1.0);
            let exact = a / (2.0 * s * s);
            assert!((q - exact).abs() / exact < 1e-8, "{q} vs {exact}");
        }
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn gpipe_ticks_small_cases() {
        assert_eq!(gpipe_makespan_by_ticks(1, 1), 2);
        // forward fill K+J-1, backward drain K+J-1
        assert_eq!(gpipe_makespan_by_ticks(4, 8), 2 * (4 + 8 - 1));
    }
}
