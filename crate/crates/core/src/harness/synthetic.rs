//! Gaussian-mixture toy data scored by the Bayes classifier.

use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::labelshift::LabelDistribution;
use crate::scores::{score_shard, CalibrationShard, ClassifierOutput};

/// Classes are isotropic 2-D Gaussians `N(θ_y, s²·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub means: Vec<[f64; 2]>,
    #[serde(default = "unit_scale")]
    pub noise_scale: f64,
    pub label_dists: Vec<LabelDistribution>,
    pub cal_sizes: Vec<usize>,
    pub test_size: usize,
    /// Prior used by the Bayes classifier; uniform when absent.
    #[serde(default)]
    pub classifier_prior: Option<LabelDistribution>,
}

fn unit_scale() -> f64 {
    1.0
}

impl SyntheticSpec {
    /// The three-class, two-agent toy problem: agents with label
    /// distributions `(0.8, 0.1, 0.1)` and `(0.1, 0.1, 0.8)` holding 1000 and
    /// 50 calibration points.
    pub fn toy() -> Self {
        Self {
            means: vec![[-1.0, 0.0], [1.0, 0.0], [1.0, 3.0]],
            noise_scale: 1.0,
            label_dists: vec![
                LabelDistribution::new(vec![0.8, 0.1, 0.1]).expect("simplex"),
                LabelDistribution::new(vec![0.1, 0.1, 0.8]).expect("simplex"),
            ],
            cal_sizes: vec![1000, 50],
            test_size: 1000,
            classifier_prior: None,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_labels();
        if k < 2 {
            return Err(invalid("need at least two classes"));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(invalid("noise_scale must be positive"));
        }
        if self.label_dists.is_empty() || self.label_dists.len() != self.cal_sizes.len() {
            return Err(invalid(
                "need one label distribution and one calibration size per agent",
            ));
        }
        let priors = self.label_dists.iter().chain(self.classifier_prior.as_ref());
        if priors.into_iter().any(|d| d.num_labels() != k) {
            return Err(invalid(format!("label distributions must have {k} entries")));
        }
        Ok(())
    }

    /// Bayes posterior `P(y | x) ∝ prior(y)·exp(−‖x − θ_y‖²/2s²)`.
    pub fn posterior(&self, x: [f64; 2]) -> ClassifierOutput {
        let k = self.num_labels();
        let uniform = LabelDistribution::uniform(k);
        let prior = self.classifier_prior.as_ref().unwrap_or(&uniform);
        let s2 = self.noise_scale * self.noise_scale;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(prior.probs())
            .map(|(m, &p)| {
                let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                p.ln() - d2 / (2.0 * s2)
            })
            .collect();
        // zero-prior classes have logit −∞ and get probability 0
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        ClassifierOutput::new(weights.into_iter().map(|w| w / total).collect()).expect("posterior is a simplex")
    }

    pub fn sample_feature<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> [f64; 2] {
        let m = self.means[label];
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        [m[0] + self.noise_scale * z0, m[1] + self.noise_scale * z1]
    }
}

pub fn sample_labels<R: Rng + ?Sized>(dist: &LabelDistribution, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let index = WeightedIndex::new(dist.probs()).map_err(|e| invalid(format!("label distribution: {e}")))?;
    Ok((0..n).map(|_| index.sample(rng)).collect())
}

/// Draws `n` labelled points from `dist` and returns their Bayes posteriors.
pub fn sample_outputs<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    dist: &LabelDistribution,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<ClassifierOutput>, Vec<usize>)> {
    let labels = sample_labels(dist, n, rng)?;
    let outputs = labels
        .iter()
        .map(|&y| spec.posterior(spec.sample_feature(y, rng)))
        .collect();
    Ok((outputs, labels))
}

/// Calibration shards for every agent and an unscored test set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub shards: Vec<CalibrationShard>,
    pub test_outputs: Vec<ClassifierOutput>,
    pub test_labels: Vec<usize>,
}

/// Draws every agent's calibration data and a test set from the label
/// distribution of `test_agent`, all scored by the Bayes classifier.
pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, test_agent: usize, rng: &mut R) -> Result<SyntheticData> {
    spec.validate()?;
    if test_agent >= spec.label_dists.len() {
        return Err(invalid(format!("test agent {test_agent} out of range")));
    }
    let mut shards = Vec::with_capacity(spec.cal_sizes.len());
    for (agent, (dist, &n)) in spec.label_dists.iter().zip(&spec.cal_sizes).enumerate() {
        let (outputs, labels) = sample_outputs(spec, dist, n, rng)?;
        shards.push(CalibrationShard {
            agent,
            examples: score_shard(&outputs, &labels, rng)?,
        });
    }
    let (test_outputs, test_labels) = sample_outputs(spec, &spec.label_dists[test_agent], spec.test_size, rng)?;
    Ok(SyntheticData {
        shards,
        test_outputs,
        test_labels,
    })
}
