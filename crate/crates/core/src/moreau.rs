//! Pinball loss, its Moreau envelope, and quantiles obtained by minimizing
//! them.
//!
//! The envelope of `S_{α,v}` with parameter `γ` is quadratic on the band
//! `v − γ(1−α) ≤ q ≤ v + γα` and linear outside it, so its gradient is the
//! clamp of `(q − v)/γ` to `[−(1−α), α]`. The expected envelope over a finite
//! measure therefore has a continuous, nondecreasing, piecewise-linear
//! gradient whose root can be located exactly.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::weighted_dist::WeightedEmpiricalDistribution;

/// Cumulative weights this close to `1 − α` make the minimizer non-unique.
pub const LEVEL_DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinballParams {
    alpha: f64,
    gamma: f64,
}

impl PinballParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha = {alpha} must lie in (0, 1)")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("gamma = {gamma} must be positive")));
        }
        Ok(Self { alpha, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Lower edge offset `γ(1−α)` of the quadratic band.
    fn below(&self) -> f64 {
        self.gamma * (1.0 - self.alpha)
    }

    /// Upper edge offset `γα` of the quadratic band.
    fn above(&self) -> f64 {
        self.gamma * self.alpha
    }
}

pub fn pinball(params: &PinballParams, v: f64, q: f64) -> f64 {
    let a = params.alpha;
    if v >= q {
        (1.0 - a) * (v - q)
    } else {
        a * (q - v)
    }
}

pub fn moreau_env(params: &PinballParams, v: f64, q: f64) -> f64 {
    let (a, g) = (params.alpha, params.gamma);
    if q < v - params.below() {
        (1.0 - a) * (v - q) - g * (1.0 - a) * (1.0 - a) / 2.0
    } else if q > v + params.above() {
        a * (q - v) - g * a * a / 2.0
    } else {
        (q - v) * (q - v) / (2.0 * g)
    }
}

pub fn moreau_grad(params: &PinballParams, v: f64, q: f64) -> f64 {
    if q < v - params.below() {
        -(1.0 - params.alpha)
    } else if q > v + params.above() {
        params.alpha
    } else {
        (q - v) / params.gamma
    }
}

/// `E_{V∼dist}[S^γ_{α,V}(q)]`.
pub fn smoothed_loss(dist: &WeightedEmpiricalDistribution, params: &PinballParams, q: f64) -> f64 {
    dist.atoms()
        .iter()
        .map(|a| a.weight * moreau_env(params, a.value, q))
        .sum()
}

/// Derivative of [`smoothed_loss`] in `q`; `(1/γ)`-Lipschitz.
pub fn smoothed_grad(dist: &WeightedEmpiricalDistribution, params: &PinballParams, q: f64) -> f64 {
    dist.atoms()
        .iter()
        .map(|a| a.weight * moreau_grad(params, a.value, q))
        .sum()
}

/// `E_{V∼dist}[S_{α,V}(q)]` without smoothing.
pub fn pinball_loss(dist: &WeightedEmpiricalDistribution, params: &PinballParams, q: f64) -> f64 {
    dist.atoms()
        .iter()
        .map(|a| a.weight * pinball(params, a.value, q))
        .sum()
}

/// Smoothed-loss gradient oracle with prefix sums, evaluated in
/// `O(log n + atoms in band)`. Used inside optimizer loops.
#[derive(Debug, Clone)]
pub struct SmoothedObjective {
    params: PinballParams,
    values: Vec<f64>,
    weights: Vec<f64>,
    /// `prefix[j] = Σ_{i<j} weights[i]`
    prefix: Vec<f64>,
}

impl SmoothedObjective {
    pub fn new(dist: &WeightedEmpiricalDistribution, params: PinballParams) -> Self {
        let values: Vec<f64> = dist.atoms().iter().map(|a| a.value).collect();
        let weights: Vec<f64> = dist.atoms().iter().map(|a| a.weight).collect();
        let mut prefix = Vec::with_capacity(weights.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            prefix.push(acc);
        }
        Self {
            params,
            values,
            weights,
            prefix,
        }
    }

    pub fn params(&self) -> &PinballParams {
        &self.params
    }

    pub fn grad(&self, q: f64) -> f64 {
        let p = &self.params;
        // atoms with v < q − γα sit on the upper linear piece,
        // atoms with v > q + γ(1−α) on the lower one
        let lo = self.values.partition_point(|&v| v < q - p.above());
        let hi = self.values.partition_point(|&v| v <= q + p.below());
        let total = self.prefix[self.prefix.len() - 1];
        let upper = self.prefix[lo];
        let lower = total - self.prefix[hi.max(lo)];
        let band: f64 = (lo..hi).map(|j| self.weights[j] * (q - self.values[j]) / p.gamma).sum();
        p.alpha * upper - (1.0 - p.alpha) * lower + band
    }
}

/// Minimizer of the smoothed loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedQuantile {
    pub value: f64,
    /// `1 − α` sits on a cumulative weight of the measure: the unsmoothed
    /// minimizer is an interval and `value` is the midpoint of the smoothed
    /// one's zero set.
    pub degenerate: bool,
}

/// Exact minimizer of [`smoothed_loss`] by locating the root of its
/// piecewise-linear gradient between consecutive band edges.
pub fn smoothed_quantile_reference(
    dist: &WeightedEmpiricalDistribution,
    params: &PinballParams,
) -> Result<SmoothedQuantile> {
    if !dist.is_normalized() {
        return Err(invalid("smoothed quantile requires a normalized distribution"));
    }
    let mut edges: Vec<f64> = dist
        .atoms()
        .iter()
        .flat_map(|a| [a.value - params.below(), a.value + params.above()])
        .collect();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let grad_at = |q: f64| smoothed_grad(dist, params, q);

    // first edge where the gradient reaches `threshold`, then linear
    // interpolation on the preceding segment
    let crossing = |threshold: f64| -> f64 {
        let idx = edges.partition_point(|&e| grad_at(e) < threshold);
        if idx == 0 {
            return edges[0];
        }
        if idx == edges.len() {
            return edges[edges.len() - 1];
        }
        let (x0, x1) = (edges[idx - 1], edges[idx]);
        let (g0, g1) = (grad_at(x0), grad_at(x1));
        if g1 == g0 {
            x1
        } else {
            x0 + (threshold - g0) * (x1 - x0) / (g1 - g0)
        }
    };

    let level = 1.0 - params.alpha;
    if dist.level_is_degenerate(level, LEVEL_DEGENERACY_TOL) {
        // zero set of the gradient, widened by rounding slack on both sides
        let slack = 1e-12;
        let lo = crossing(-slack);
        let hi = {
            let idx = edges.partition_point(|&e| grad_at(e) <= slack);
            if idx == 0 {
                edges[0]
            } else if idx == edges.len() {
                edges[edges.len() - 1]
            } else {
                let (x0, x1) = (edges[idx - 1], edges[idx]);
                let (g0, g1) = (grad_at(x0), grad_at(x1));
                if g1 == g0 {
                    x0
                } else {
                    x0 + (slack - g0) * (x1 - x0) / (g1 - g0)
                }
            }
        };
        return Ok(SmoothedQuantile {
            value: 0.5 * (lo + hi),
            degenerate: true,
        });
    }
    Ok(SmoothedQuantile {
        value: crossing(0.0),
        degenerate: false,
    })
}
