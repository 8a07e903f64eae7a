//! Simulated federated averaging on the smoothed pinball loss, with Gaussian
//! gradient noise and uniform client subsampling.
//!
//! Each round the server draws a fixed-size subset of agents. Every selected
//! agent starts from the server iterate, takes `K` noisy gradient steps on its
//! local smoothed loss and reports the displacement and the mean of its local
//! iterates. The server applies the `λ`-weighted displacement (rescaled by
//! `n/|S|`) and folds the weighted iterate means into a running average,
//! which is the returned estimate.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::labelshift::QueryWeighting;
use crate::moreau::{PinballParams, SmoothedObjective};

/// Optimizer and privacy-noise settings. Defaults are the experimental
/// settings `T = 200`, `K = 20`, `η = 1e-3`, `γ = 1e-6`, no noise, full
/// participation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub step_size: f64,
    pub gamma: f64,
    pub noise_std: f64,
    /// Agents sampled per round; `None` means all of them.
    pub subsample_size: Option<usize>,
    /// Starting point `q₀`; `None` starts at the target level `1 − α`.
    pub initial_q: Option<f64>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_steps: 20,
            step_size: 1e-3,
            gamma: 1e-6,
            noise_std: 0.0,
            subsample_size: None,
            initial_q: None,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 {
            return Err(invalid("rounds and local_steps must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid(format!("step_size = {} must be positive", self.step_size)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("gamma = {} must be positive", self.gamma)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid(format!("noise_std = {} must be non-negative", self.noise_std)));
        }
        if self.subsample_size == Some(0) {
            return Err(invalid("subsample_size must be at least 1"));
        }
        if let Some(q0) = self.initial_q {
            if !q0.is_finite() {
                return Err(invalid("initial_q must be finite"));
            }
        }
        Ok(())
    }
}

/// Server state after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// 1-based round index `t`.
    pub round: usize,
    pub selected: Vec<usize>,
    pub q: f64,
    pub q_bar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedEstimate {
    pub estimate: f64,
    pub trace: Vec<RoundTrace>,
}

/// Runs the federated quantile estimator for one query label at level
/// `1 − alpha`.
pub fn dp_fed_avg_qe<R: Rng + ?Sized>(
    config: &FedConfig,
    query: &QueryWeighting,
    alpha: f64,
    rng: &mut R,
) -> Result<FedEstimate> {
    config.validate()?;
    let params = PinballParams::new(alpha, config.gamma)?;
    let n = query.num_agents();
    let s = config.subsample_size.unwrap_or(n);
    if s > n {
        return Err(invalid(format!("subsample_size {s} exceeds the {n} agents")));
    }
    let objectives: Vec<SmoothedObjective> = query.locals.iter().map(|d| SmoothedObjective::new(d, params)).collect();
    let noise = (config.noise_std > 0.0)
        .then(|| Normal::new(0.0, config.noise_std))
        .transpose()
        .map_err(|e| invalid(format!("noise distribution: {e}")))?;

    let eta = config.step_size;
    let k_steps = config.local_steps;
    let scale = n as f64 / s as f64;
    let mut q = config.initial_q.unwrap_or(1.0 - alpha);
    let mut q_bar = 0.0;
    let mut trace = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let selected: Vec<usize> = if s == n {
            (0..n).collect()
        } else {
            let mut picked = index::sample(rng, n, s).into_vec();
            picked.sort_unstable();
            picked
        };

        let mut delta = 0.0;
        let mut mean_iterates = 0.0;
        for &i in &selected {
            let lambda = query.lambdas[i];
            if lambda == 0.0 {
                continue;
            }
            let objective = &objectives[i];
            let mut local = q;
            let mut iterate_sum = 0.0;
            for _ in 0..k_steps {
                let z = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                local -= eta * (objective.grad(local) + z);
                iterate_sum += local;
            }
            delta += lambda * (local - q);
            mean_iterates += lambda * iterate_sum / k_steps as f64;
        }

        q += scale * delta;
        let t_f = t as f64;
        q_bar = t_f / (t_f + 1.0) * q_bar + scale * mean_iterates / (t_f + 1.0);
        trace.push(RoundTrace {
            round: t + 1,
            selected,
            q,
            q_bar,
        });
    }

    Ok(FedEstimate { estimate: q_bar, trace })
}

/// Client-drift measure `max_i sup_q |∇S^i(q) − ∇S(q)|^{1/2}` over agents
/// with positive mixture weight.
///
/// Both gradients are piecewise linear with kinks only at band edges, so the
/// supremum is attained on the finite grid of edges and atom locations.
pub fn heterogeneity_zeta(query: &QueryWeighting, params: &PinballParams) -> f64 {
    let global = SmoothedObjective::new(&query.global, *params);
    let active: Vec<SmoothedObjective> = query
        .lambdas
        .iter()
        .zip(&query.locals)
        .filter(|(l, _)| **l > 0.0)
        .map(|(_, d)| SmoothedObjective::new(d, *params))
        .collect();
    let grid: Vec<f64> = query
        .locals
        .iter()
        .flat_map(|d| d.atoms().iter())
        .flat_map(|a| {
            let v = a.value;
            [
                v - params.gamma() * (1.0 - params.alpha()),
                v - params.gamma() * params.alpha(),
                v,
                v + params.gamma() * params.alpha(),
                v + params.gamma() * (1.0 - params.alpha()),
            ]
        })
        .collect();
    let gap = grid
        .iter()
        .flat_map(|&q| {
            let g = global.grad(q);
            active.iter().map(move |local| (local.grad(q) - g).abs())
        })
        .fold(0.0, f64::max);
    gap.sqrt()
}

/// Writes `t,q_t,qbar_t` rows.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[RoundTrace]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("t,q_t,qbar_t\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.round, r.q, r.q_bar));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
