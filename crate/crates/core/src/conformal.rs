//! Prediction sets for the five calibration methods, and the permutation
//! weights used to check the coverage sandwich on tiny instances.

use std::fmt;

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fedopt::{dp_fed_avg_qe, FedConfig};
use crate::labelshift::{query_weights, take_subsample, LikelihoodRatios, SubsampleAllocation};
use crate::scores::{CalibrationShard, ScoredExample};
use crate::weighted_dist::WeightedEmpiricalDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// Target agent's own scores, equal weights.
    UnweightedLocal,
    /// Every agent's scores pooled with equal weights.
    UnweightedGlobal,
    /// Label-shift weights from the true label distributions.
    OracleWeights,
    /// Label-shift weights estimated from label counts, exact quantile.
    EstimatedWeights,
    /// Estimated weights from privatized counts, federated quantile.
    DpFedCp,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::UnweightedLocal,
        MethodKind::UnweightedGlobal,
        MethodKind::OracleWeights,
        MethodKind::EstimatedWeights,
        MethodKind::DpFedCp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::UnweightedLocal => "unweighted_local",
            MethodKind::UnweightedGlobal => "unweighted_global",
            MethodKind::OracleWeights => "oracle_weights",
            MethodKind::EstimatedWeights => "estimated_weights",
            MethodKind::DpFedCp => "dp_fed_cp",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Labels whose score does not exceed their quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub labels: Vec<usize>,
    /// Quantile used for each candidate label; `None` marks a label excluded
    /// because its weights were degenerate.
    pub quantiles: Vec<Option<f64>>,
}

impl PredictionSet {
    pub fn from_quantiles(scores_for_x: &[f64], quantiles: Vec<Option<f64>>) -> Result<Self> {
        if scores_for_x.len() != quantiles.len() {
            return Err(invalid(format!(
                "{} candidate scores for {} label quantiles",
                scores_for_x.len(),
                quantiles.len()
            )));
        }
        let labels = scores_for_x
            .iter()
            .zip(&quantiles)
            .enumerate()
            .filter(|(_, (v, q))| q.is_some_and(|q| **v <= q))
            .map(|(y, _)| y)
            .collect();
        Ok(Self { labels, quantiles })
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels excluded because of degenerate weights.
    pub fn degenerate_labels(&self) -> Vec<usize> {
        self.quantiles
            .iter()
            .enumerate()
            .filter(|(_, q)| q.is_none())
            .map(|(y, _)| y)
            .collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid(format!("alpha = {alpha} must lie in [0, 1)")));
    }
    Ok(())
}

/// `Q_{1−α}` of the equal-weight measure over `scores` and the atom at 1.
pub fn unweighted_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(invalid("no calibration scores"));
    }
    if alpha == 0.0 {
        return Ok(1.0);
    }
    WeightedEmpiricalDistribution::from_scores_uniform(scores, true)?.quantile(1.0 - alpha)
}

pub fn predict_unweighted_local(shard: &CalibrationShard, scores_for_x: &[f64], alpha: f64) -> Result<PredictionSet> {
    let scores: Vec<f64> = shard.examples.iter().map(|e| e.score).collect();
    let q = unweighted_quantile(&scores, alpha)?;
    PredictionSet::from_quantiles(scores_for_x, vec![Some(q); scores_for_x.len()])
}

pub fn predict_unweighted_global(
    shards: &[CalibrationShard],
    scores_for_x: &[f64],
    alpha: f64,
) -> Result<PredictionSet> {
    let scores: Vec<f64> = shards.iter().flat_map(|s| s.examples.iter().map(|e| e.score)).collect();
    let q = unweighted_quantile(&scores, alpha)?;
    PredictionSet::from_quantiles(scores_for_x, vec![Some(q); scores_for_x.len()])
}

/// How the per-label weighted quantile is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantileSolver {
    /// Step-function quantile of the global weighted measure.
    Exact,
    /// Federated estimate on the smoothed pinball loss.
    Federated(FedConfig),
}

/// Retains `min(N̄^i, N^i)` examples from every shard.
pub fn take_allocation<R: Rng + ?Sized>(
    shards: &[CalibrationShard],
    allocation: &SubsampleAllocation,
    rng: &mut R,
) -> Result<Vec<Vec<ScoredExample>>> {
    if allocation.per_agent.len() != shards.len() {
        return Err(invalid(format!(
            "allocation covers {} agents but {} shards were given",
            allocation.per_agent.len(),
            shards.len()
        )));
    }
    Ok(shards
        .iter()
        .zip(&allocation.per_agent)
        .map(|(s, &k)| take_subsample(&s.examples, k, rng))
        .collect())
}

/// Weighted `(1 − α)`-quantile for one query label, or `None` when the
/// label's weights are degenerate.
pub fn weighted_label_quantile<R: Rng + ?Sized>(
    ratios: &LikelihoodRatios,
    taken: &[Vec<ScoredExample>],
    shard_sizes: &[usize],
    query: usize,
    alpha: f64,
    solver: &QuantileSolver,
    rng: &mut R,
) -> Result<Option<f64>> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(Some(1.0));
    }
    let weighting = match query_weights(ratios, taken, shard_sizes, query) {
        Ok(w) => w,
        Err(Error::DegenerateWeights { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let q = match solver {
        QuantileSolver::Exact => weighting.global.quantile(1.0 - alpha)?,
        QuantileSolver::Federated(config) => dp_fed_avg_qe(config, &weighting, alpha, rng)?.estimate,
    };
    Ok(Some(q))
}

/// Weighted prediction set with one shared subsample for every candidate
/// label.
pub fn predict_weighted<R: Rng + ?Sized>(
    shards: &[CalibrationShard],
    ratios: &LikelihoodRatios,
    allocation: &SubsampleAllocation,
    scores_for_x: &[f64],
    alpha: f64,
    solver: &QuantileSolver,
    rng: &mut R,
) -> Result<PredictionSet> {
    if scores_for_x.len() != ratios.num_labels() {
        return Err(invalid("one candidate score per label is required"));
    }
    let taken = take_allocation(shards, allocation, rng)?;
    let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
    let quantiles = (0..ratios.num_labels())
        .map(|y| weighted_label_quantile(ratios, &taken, &sizes, y, alpha, solver, rng))
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::from_quantiles(scores_for_x, quantiles)
}

/// Largest calibration set the permutation oracle accepts.
pub const PERMUTATION_ORACLE_MAX: usize = 5;

/// Exact non-exchangeability weights for `N` calibration points and one test
/// point, by summing the joint likelihood ratio over all `(N+1)!` ways of
/// assigning the points to the calibration slots and the test slot.
///
/// `calibration` lists `(agent, label)` in slot order; `agent_ratios[i]` is
/// `P^i / P_cal` and `target_ratios` is `P^⋆ / P_cal`. The returned vector has
/// `N + 1` entries, the last one for the test point.
pub fn permutation_weight_oracle(
    calibration: &[(usize, usize)],
    test_label: usize,
    agent_ratios: &[LikelihoodRatios],
    target_ratios: &LikelihoodRatios,
) -> Result<Vec<f64>> {
    let n = calibration.len();
    if n > PERMUTATION_ORACLE_MAX {
        return Err(invalid(format!(
            "permutation oracle enumerates (N+1)! terms and is limited to N <= {PERMUTATION_ORACLE_MAX}, got {n}"
        )));
    }
    let labels: Vec<usize> = calibration.iter().map(|&(_, y)| y).chain([test_label]).collect();
    for &(agent, _) in calibration {
        if agent >= agent_ratios.len() {
            return Err(invalid(format!("no ratios for agent {agent}")));
        }
    }
    if labels.iter().any(|&y| y >= target_ratios.num_labels())
        || agent_ratios
            .iter()
            .any(|r| r.num_labels() != target_ratios.num_labels())
    {
        return Err(invalid("label out of range for the supplied ratios"));
    }

    let mut weights = vec![0.0; n + 1];
    for perm in (0..=n).permutations(n + 1) {
        let at_test = perm[n];
        let slots: f64 = calibration
            .iter()
            .zip(&perm)
            .map(|(&(agent, _), &point)| agent_ratios[agent].get(labels[point]))
            .product();
        weights[at_test] += target_ratios.get(labels[at_test]) * slots;
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("every permutation has zero likelihood"));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}
