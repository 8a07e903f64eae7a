//! Discrete Gaussian count privatization and the closed-form gradient-noise
//! calibration for DP-FedCP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::labelshift::LabelCounts;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    /// Standard deviation `σ̄` of the discrete Gaussian noise added to label
    /// counts. It is a raw knob and is not charged against `(ε, δ)`.
    #[serde(default)]
    pub count_noise_std: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64, count_noise_std: f64) -> Result<Self> {
        let budget = Self {
            epsilon,
            delta,
            count_noise_std,
        };
        budget.validate()?;
        Ok(budget)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon = {} must be positive", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta = {} must lie in (0, 1)", self.delta)));
        }
        if !(self.count_noise_std >= 0.0 && self.count_noise_std.is_finite()) {
            return Err(invalid(format!(
                "count_noise_std = {} must be non-negative",
                self.count_noise_std
            )));
        }
        Ok(())
    }
}

fn bernoulli_exp<R: Rng + ?Sized>(x: f64, rng: &mut R) -> bool {
    rng.random::<f64>() < (-x).exp()
}

/// Discrete Laplace on ℤ with `P(k) ∝ exp(−|k|/t)`.
fn discrete_laplace<R: Rng + ?Sized>(t: u64, rng: &mut R) -> i64 {
    let tf = t as f64;
    loop {
        let u = rng.random_range(0..t);
        if !bernoulli_exp(u as f64 / tf, rng) {
            continue;
        }
        let mut v = 0u64;
        while bernoulli_exp(1.0, rng) {
            v += 1;
        }
        let magnitude = (u + t * v) as i64;
        let negative: bool = rng.random();
        if negative && magnitude == 0 {
            continue;
        }
        return if negative { -magnitude } else { magnitude };
    }
}

/// Draws from `N_ℤ(0, σ²)`, the distribution on ℤ with `P(k) ∝ exp(−k²/2σ²)`,
/// by rejection from a discrete Laplace proposal.
///
/// The Bernoulli acceptance steps use double-precision `exp`.
pub fn discrete_gaussian_sample<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> i64 {
    if !(sigma > 0.0) {
        return 0;
    }
    let t = sigma.floor() as u64 + 1;
    let sigma2 = sigma * sigma;
    let shift = sigma2 / t as f64;
    loop {
        let y = discrete_laplace(t, rng);
        let d = y.unsigned_abs() as f64 - shift;
        if bernoulli_exp(d * d / (2.0 * sigma2), rng) {
            return y;
        }
    }
}

/// Replaces every count `M_y` with `max(1, M_y + ξ_y)`.
pub fn privatize_counts<R: Rng + ?Sized>(counts: &LabelCounts, sigma: f64, rng: &mut R) -> LabelCounts {
    let noisy = counts
        .counts
        .iter()
        .map(|&m| {
            let xi = discrete_gaussian_sample(sigma, rng);
            (m as i128 + xi as i128).max(1) as u64
        })
        .collect();
    LabelCounts {
        agent: counts.agent,
        counts: noisy,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma_g: f64,
    pub delta_bar: f64,
}

/// Upper end of the admissible `δ` interval, `1 − (1 + √ε)(1 − S/n)^T`.
pub fn admissible_delta_upper(epsilon: f64, rounds: usize, s: usize, n: usize) -> f64 {
    let keep = 1.0 - s as f64 / n as f64;
    1.0 - (1.0 + epsilon.sqrt()) * keep.powi(rounds as i32)
}

/// Smallest gradient-noise level for which `T` rounds of `K` local steps
/// with `S` of `n` agents are `(ε, δ)`-DP towards a third party:
///
/// `σ_g = 2·√((K·λ_max/ε)·(1 + 24·S·√T·log(1/δ̄)/(ε·n)))`, with
/// `δ̄ = (n/S)·[1 − ((1 − δ)/(1 + √ε))^{1/T}]`.
pub fn calibrate_sigma_g(
    budget: &PrivacyBudget,
    rounds: usize,
    local_steps: usize,
    s: usize,
    n: usize,
    lambda_max: f64,
) -> Result<Calibration> {
    budget.validate()?;
    if rounds == 0 || local_steps == 0 {
        return Err(invalid("rounds and local_steps must be at least 1"));
    }
    if s == 0 || s > n {
        return Err(invalid(format!("subsample size {s} must lie in [1, {n}]")));
    }
    if !(lambda_max >= 0.0 && lambda_max.is_finite()) {
        return Err(invalid(format!("lambda_max = {lambda_max} must be non-negative")));
    }
    let eps = budget.epsilon;
    let upper = admissible_delta_upper(eps, rounds, s, n);
    if !(budget.delta < upper) {
        return Err(Error::InvalidBudget {
            delta: budget.delta,
            upper,
        });
    }
    let (t, k, s, n) = (rounds as f64, local_steps as f64, s as f64, n as f64);
    let delta_bar = (n / s) * (1.0 - ((1.0 - budget.delta) / (1.0 + eps.sqrt())).powf(1.0 / t));
    if !(delta_bar > 0.0 && delta_bar < 1.0) {
        return Err(Error::InvalidBudget {
            delta: budget.delta,
            upper,
        });
    }
    let inner = 1.0 + 24.0 * s * t.sqrt() * (1.0 / delta_bar).ln() / (eps * n);
    let sigma_g = 2.0 * (k * lambda_max / eps * inner).sqrt();
    Ok(Calibration { sigma_g, delta_bar })
}
