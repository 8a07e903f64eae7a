//! Label-shift likelihood ratios, multinomial calibration subsampling and the
//! per-query weighted distributions built from them.
//!
//! For a query label `y'` every retained calibration example with label `y`
//! gets weight `w_y / (w_y' + Σ w_{Y_k})` and the sentinel atom at 1 gets
//! `w_y' / (w_y' + Σ w_{Y_k})`. The same measure is also split into per-agent
//! pieces `μ^i` with mixture weights `λ^i`, which is what the federated
//! optimizer consumes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scores::ScoredExample;
use crate::weighted_dist::WeightedEmpiricalDistribution;

pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector over labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs, "label distribution")?;
        Ok(Self { probs })
    }

    pub fn uniform(n_labels: usize) -> Self {
        Self {
            probs: vec![1.0 / n_labels as f64; n_labels],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_labels(&self) -> usize {
        self.probs.len()
    }
}

/// Per-label importance weights mapping the calibration mixture onto the
/// target agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LikelihoodRatios {
    w: Vec<f64>,
}

impl LikelihoodRatios {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(invalid("likelihood ratios must be finite and non-negative"));
        }
        Ok(Self { w })
    }

    pub fn ones(n_labels: usize) -> Self {
        Self { w: vec![1.0; n_labels] }
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn get(&self, label: usize) -> f64 {
        self.w[label]
    }

    pub fn num_labels(&self) -> usize {
        self.w.len()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.w.iter().map(|x| x * c).collect())
    }
}

/// Label counts reported by one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub agent: usize,
    pub counts: Vec<u64>,
}

impl LabelCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_labels(agent: usize, labels: impl IntoIterator<Item = usize>, n_labels: usize) -> Self {
        let mut counts = vec![0; n_labels];
        for y in labels {
            counts[y] += 1;
        }
        Self { agent, counts }
    }
}

/// Multinomial draw of how many calibration points each agent contributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleAllocation {
    pub per_agent: Vec<usize>,
    pub total: usize,
}

impl SubsampleAllocation {
    /// Number of examples actually taken from each agent, `min(N̄^i, N^i)`.
    pub fn effective(&self, shard_sizes: &[usize]) -> Vec<usize> {
        self.per_agent
            .iter()
            .zip(shard_sizes)
            .map(|(&a, &n)| a.min(n))
            .collect()
    }
}

/// The weighted measure for one query label, both globally and split per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryWeighting {
    pub query: usize,
    /// Mixture weights `λ^i`, summing to one.
    pub lambdas: Vec<f64>,
    /// Local measures `μ^i`. Agents with `λ^i = 0` carry a placeholder point
    /// mass at 1.
    pub locals: Vec<WeightedEmpiricalDistribution>,
    /// The global measure built directly from the weights.
    pub global: WeightedEmpiricalDistribution,
    /// Weight of the sentinel atom at 1.
    pub sentinel_weight: f64,
    /// Set when the query label itself has ratio zero, so the sentinel carries
    /// no mass.
    pub zero_query_ratio: bool,
}

impl QueryWeighting {
    pub fn num_agents(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambdas.iter().copied().fold(0.0, f64::max)
    }

    /// `Σ_i λ^i μ^i`.
    pub fn reconstruct(&self) -> Result<WeightedEmpiricalDistribution> {
        WeightedEmpiricalDistribution::mixture(self.lambdas.iter().copied().zip(self.locals.iter()))
    }
}

/// `P_cal(y) = Σ_i π_i P^i(y)`.
pub fn mixture_label_dist(agents: &[(f64, &LabelDistribution)]) -> Result<LabelDistribution> {
    let Some((_, first)) = agents.first() else {
        return Err(invalid("mixture needs at least one agent"));
    };
    let pi: Vec<f64> = agents.iter().map(|(p, _)| *p).collect();
    check_simplex(&pi, "mixture weights")?;
    let n_labels = first.num_labels();
    if agents.iter().any(|(_, d)| d.num_labels() != n_labels) {
        return Err(invalid("agents disagree on the number of labels"));
    }
    let mut probs = vec![0.0; n_labels];
    for (p, dist) in agents {
        for (acc, q) in probs.iter_mut().zip(dist.probs()) {
            *acc += p * q;
        }
    }
    Ok(LabelDistribution { probs })
}

/// `w*_y = P*(y) / P_cal(y)`, with `0/0 = 0`.
pub fn oracle_ratios(target: &LabelDistribution, cal: &LabelDistribution) -> Result<LikelihoodRatios> {
    if target.num_labels() != cal.num_labels() {
        return Err(invalid("target and calibration label sets differ"));
    }
    let w = target
        .probs()
        .iter()
        .zip(cal.probs())
        .enumerate()
        .map(|(label, (&t, &c))| match (t > 0.0, c > 0.0) {
            (_, true) => Ok(t / c),
            (false, false) => Ok(0.0),
            (true, false) => Err(Error::UnsupportedShift { label }),
        })
        .collect::<Result<Vec<_>>>()?;
    LikelihoodRatios::new(w)
}

/// Count-based estimate `ŵ_y = (M · M*_y) / (M* · M_y) · 1{M_y ≥ 1}`.
pub fn mle_ratios(all_counts: &[LabelCounts], target_agent: usize) -> Result<LikelihoodRatios> {
    let target = all_counts
        .iter()
        .find(|c| c.agent == target_agent)
        .ok_or_else(|| invalid(format!("target agent {target_agent} has no reported counts")))?;
    let n_labels = target.counts.len();
    if all_counts.iter().any(|c| c.counts.len() != n_labels) {
        return Err(invalid("agents disagree on the number of labels"));
    }
    let m_target = target.total();
    if m_target == 0 {
        return Err(invalid(format!("target agent {target_agent} reports no training data")));
    }
    let mut per_label = vec![0u64; n_labels];
    for c in all_counts {
        for (acc, &m) in per_label.iter_mut().zip(&c.counts) {
            *acc += m;
        }
    }
    let m_total: u64 = per_label.iter().sum();
    let w = per_label
        .iter()
        .zip(&target.counts)
        .map(|(&m_y, &m_target_y)| {
            if m_y == 0 {
                0.0
            } else {
                (m_total as f64 * m_target_y as f64) / (m_target as f64 * m_y as f64)
            }
        })
        .collect();
    LikelihoodRatios::new(w)
}

/// `N̄` points spread over agents as `Multinomial(N̄, π)`.
pub fn multinomial_subsample<R: Rng + ?Sized>(total: usize, pi: &[f64], rng: &mut R) -> Result<SubsampleAllocation> {
    if total == 0 {
        return Err(invalid("subsample size must be at least 1"));
    }
    check_simplex(pi, "subsampling probabilities")?;
    let mut per_agent = vec![0; pi.len()];
    let mut remaining = total as u64;
    let mut mass_left = 1.0;
    for (i, &p) in pi.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == pi.len() || p >= mass_left {
            per_agent[i] = remaining as usize;
            break;
        }
        let prob = (p / mass_left).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, prob)
            .map_err(|e| invalid(format!("binomial parameters: {e}")))?
            .sample(rng);
        per_agent[i] = draw as usize;
        remaining -= draw;
        mass_left -= p;
    }
    Ok(SubsampleAllocation { per_agent, total })
}

/// Default subsampling parameters: `N̄ = ⌊N/2⌋` and `π_i = N^i / N`.
pub fn default_subsample_params(shard_sizes: &[usize]) -> Result<(usize, Vec<f64>)> {
    let n: usize = shard_sizes.iter().sum();
    if n == 0 {
        return Err(invalid("no calibration data"));
    }
    let pi = shard_sizes.iter().map(|&s| s as f64 / n as f64).collect();
    Ok(((n / 2).max(1), pi))
}

/// Takes `min(k, len)` examples: the first ones after a shuffle of the shard.
pub fn take_subsample<R: Rng + ?Sized>(shard: &[ScoredExample], k: usize, rng: &mut R) -> Vec<ScoredExample> {
    let mut copy = shard.to_vec();
    copy.shuffle(rng);
    copy.truncate(k.min(shard.len()));
    copy
}

/// Builds the weighted measure for query label `query` from the retained
/// examples of each agent. `shard_sizes` are the full calibration sizes `N^i`,
/// which decide how the sentinel mass is shared between agents.
pub fn query_weights(
    ratios: &LikelihoodRatios,
    taken: &[Vec<ScoredExample>],
    shard_sizes: &[usize],
    query: usize,
) -> Result<QueryWeighting> {
    let n_labels = ratios.num_labels();
    if query >= n_labels {
        return Err(invalid(format!("query label {query} out of range")));
    }
    if taken.len() != shard_sizes.len() || taken.is_empty() {
        return Err(invalid("need one retained example list and one shard size per agent"));
    }
    for (examples, &size) in taken.iter().zip(shard_sizes) {
        if examples.len() > size {
            return Err(invalid("an agent retained more examples than it holds"));
        }
        if let Some(ex) = examples.iter().find(|e| e.label >= n_labels) {
            return Err(invalid(format!("example label {} out of range", ex.label)));
        }
    }
    let n_total: usize = shard_sizes.iter().sum();

    let w_query = ratios.get(query);
    let denom = w_query + taken.iter().flatten().map(|ex| ratios.get(ex.label)).sum::<f64>();
    if !(denom > 0.0) {
        return Err(Error::DegenerateWeights { label: query });
    }
    let sentinel = w_query / denom;

    let mut lambdas = Vec::with_capacity(taken.len());
    let mut locals = Vec::with_capacity(taken.len());
    for (examples, &size) in taken.iter().zip(shard_sizes) {
        let sentinel_share = size as f64 / n_total as f64 * sentinel;
        let lambda = sentinel_share + examples.iter().map(|ex| ratios.get(ex.label) / denom).sum::<f64>();
        let local = if lambda > 0.0 {
            let atoms = examples
                .iter()
                .map(|ex| (ex.score, ratios.get(ex.label) / denom / lambda))
                .chain(std::iter::once((1.0, sentinel_share / lambda)));
            WeightedEmpiricalDistribution::new(atoms)?.normalize()
        } else {
            WeightedEmpiricalDistribution::point_mass(1.0)?
        };
        lambdas.push(lambda);
        locals.push(local);
    }

    let global_atoms = taken
        .iter()
        .flatten()
        .map(|ex| (ex.score, ratios.get(ex.label) / denom))
        .chain(std::iter::once((1.0, sentinel)));
    let global = WeightedEmpiricalDistribution::new(global_atoms)?.normalize();

    Ok(QueryWeighting {
        query,
        lambdas,
        locals,
        global,
        sentinel_weight: sentinel,
        zero_query_ratio: w_query == 0.0,
    })
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(invalid(format!("{what} is empty")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dist(p: &[f64]) -> LabelDistribution {
        LabelDistribution::new(p.to_vec()).unwrap()
    }

    fn ex(score: f64, label: usize) -> ScoredExample {
        ScoredExample { score, label }
    }

    #[test]
    fn mixture_examples() {
        let a = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(mixture_label_dist(&[(1.0, &a)]).unwrap(), a);

        let m = mixture_label_dist(&[(0.5, &dist(&[1.0, 0.0])), (0.5, &dist(&[0.0, 1.0]))]).unwrap();
        assert_eq!(m.probs(), &[0.5, 0.5]);

        let p1 = dist(&[0.8, 0.1, 0.1]);
        let p2 = dist(&[0.1, 0.1, 0.8]);
        let m = mixture_label_dist(&[(1000.0 / 1050.0, &p1), (50.0 / 1050.0, &p2)]).unwrap();
        for (got, want) in m.probs().iter().zip([805.0, 105.0, 140.0]) {
            assert!((got - want / 1050.0).abs() < 1e-12);
        }

        assert!(mixture_label_dist(&[(0.7, &p1), (0.7, &p2)]).is_err());
    }

    #[test]
    fn oracle_ratio_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(oracle_ratios(&p, &p).unwrap().values(), &[1.0, 1.0, 1.0]);

        let p1 = dist(&[0.8, 0.1, 0.1]);
        let p2 = dist(&[0.1, 0.1, 0.8]);
        let cal = mixture_label_dist(&[(1000.0 / 1050.0, &p1), (50.0 / 1050.0, &p2)]).unwrap();
        let w = oracle_ratios(&p2, &cal).unwrap();
        assert!((w.get(0) - 0.1 / (805.0 / 1050.0)).abs() < 1e-12);
        assert!((w.get(0) - 0.130_434_782_6).abs() < 1e-9);

        let w = oracle_ratios(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert_eq!(w.values(), &[2.0, 0.0]);

        let w = oracle_ratios(&dist(&[1.0, 0.0]), &dist(&[1.0, 0.0])).unwrap();
        assert_eq!(w.values(), &[1.0, 0.0]);

        assert!(matches!(
            oracle_ratios(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])),
            Err(Error::UnsupportedShift { label: 1 })
        ));
    }

    #[test]
    fn mle_examples() {
        let counts = [
            LabelCounts {
                agent: 1,
                counts: vec![8, 2],
            },
            LabelCounts {
                agent: 2,
                counts: vec![2, 8],
            },
        ];
        let w = mle_ratios(&counts, 2).unwrap();
        assert!((w.get(0) - 0.4).abs() < 1e-15);
        assert!((w.get(1) - 1.6).abs() < 1e-15);

        let same = [
            LabelCounts {
                agent: 0,
                counts: vec![3, 5, 2],
            },
            LabelCounts {
                agent: 1,
                counts: vec![3, 5, 2],
            },
        ];
        assert_eq!(mle_ratios(&same, 0).unwrap().values(), &[1.0, 1.0, 1.0]);

        let missing = [
            LabelCounts {
                agent: 0,
                counts: vec![3, 0],
            },
            LabelCounts {
                agent: 1,
                counts: vec![1, 0],
            },
        ];
        assert_eq!(mle_ratios(&missing, 1).unwrap().get(1), 0.0);

        let empty = [
            LabelCounts {
                agent: 0,
                counts: vec![3, 1],
            },
            LabelCounts {
                agent: 1,
                counts: vec![0, 0],
            },
        ];
        assert!(mle_ratios(&empty, 1).is_err());
        assert!(mle_ratios(&empty, 7).is_err());
    }

    #[test]
    fn multinomial_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = multinomial_subsample(17, &[1.0, 0.0, 0.0], &mut rng).unwrap();
        assert_eq!(a.per_agent, vec![17, 0, 0]);

        for _ in 0..200 {
            let a = multinomial_subsample(25, &[0.2, 0.5, 0.3], &mut rng).unwrap();
            assert_eq!(a.per_agent.iter().sum::<usize>(), 25);
        }

        let draw = |seed| multinomial_subsample(40, &[0.5, 0.5], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(5), draw(5));

        assert!(multinomial_subsample(0, &[1.0], &mut rng).is_err());
        assert!(multinomial_subsample(3, &[0.4, 0.4], &mut rng).is_err());
    }

    #[test]
    fn multinomial_law_of_large_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 100_000;
        let total = 10;
        let first: usize = (0..draws)
            .map(|_| multinomial_subsample(total, &[0.3, 0.7], &mut rng).unwrap().per_agent[0])
            .sum();
        let frac = first as f64 / (draws * total) as f64;
        assert!((frac - 0.3).abs() < 0.01 * 0.3, "fraction {frac}");
    }

    #[test]
    fn effective_take_truncates() {
        let a = SubsampleAllocation {
            per_agent: vec![5, 1],
            total: 6,
        };
        assert_eq!(a.effective(&[3, 4]), vec![3, 1]);
    }

    #[test]
    fn take_subsample_respects_size() {
        let shard: Vec<_> = (0..10).map(|k| ex(k as f64 / 10.0, 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(take_subsample(&shard, 4, &mut rng).len(), 4);
        assert_eq!(take_subsample(&shard, 40, &mut rng).len(), 10);
    }

    #[test]
    fn query_weights_uniform_reduction() {
        let taken = vec![vec![ex(0.1, 0), ex(0.4, 1)], vec![ex(0.7, 2)]];
        let q = query_weights(&LikelihoodRatios::ones(3), &taken, &[4, 2], 1).unwrap();
        for a in q.global.atoms() {
            assert!((a.weight - 0.25).abs() < 1e-15);
        }
        let unweighted = WeightedEmpiricalDistribution::from_scores_uniform(&[0.1, 0.4, 0.7], true).unwrap();
        for beta in [0.1, 0.5, 0.74, 0.9] {
            assert_eq!(q.global.quantile(beta).unwrap(), unweighted.quantile(beta).unwrap());
        }
    }

    #[test]
    fn query_weights_single_agent_example() {
        let ratios = LikelihoodRatios::new(vec![2.0, 1.0]).unwrap();
        let q = query_weights(&ratios, &[vec![ex(0.3, 0)]], &[1], 1).unwrap();
        assert!((q.global.atoms()[0].weight - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.sentinel_weight - 1.0 / 3.0).abs() < 1e-15);
        assert!((q.lambdas[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn query_weights_reconstruction() {
        let ratios = LikelihoodRatios::new(vec![0.3, 1.7, 0.9]).unwrap();
        let taken = vec![vec![ex(0.11, 0), ex(0.52, 1), ex(0.93, 2)], vec![ex(0.21, 2)], vec![]];
        let q = query_weights(&ratios, &taken, &[5, 3, 2], 0).unwrap();
        assert!((q.lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.locals.iter().all(|d| d.is_normalized()));
        let rebuilt = q.reconstruct().unwrap();
        assert_eq!(rebuilt.len(), q.global.len());
        for (a, b) in rebuilt.atoms().iter().zip(q.global.atoms()) {
            assert_eq!(a.value, b.value);
            assert!((a.weight - b.weight).abs() < 1e-9);
        }
        // the agent holding nothing still owns its share of the sentinel
        assert!(q.lambdas[2] > 0.0);
        assert_eq!(q.locals[2].atoms().len(), 1);
    }

    #[test]
    fn query_weights_degenerate() {
        let ratios = LikelihoodRatios::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            query_weights(&ratios, &[vec![ex(0.3, 0)]], &[1], 0),
            Err(Error::DegenerateWeights { label: 0 })
        ));
        let q = query_weights(&ratios, &[vec![ex(0.3, 1)]], &[1], 0).unwrap();
        assert!(q.zero_query_ratio);
        assert_eq!(q.sentinel_weight, 0.0);
    }

    #[test]
    fn query_weights_input_checks() {
        let r = LikelihoodRatios::ones(2);
        assert!(query_weights(&r, &[vec![ex(0.3, 0)]], &[1], 2).is_err());
        assert!(query_weights(&r, &[vec![ex(0.3, 5)]], &[1], 0).is_err());
        assert!(query_weights(&r, &[vec![ex(0.3, 0), ex(0.4, 0)]], &[1], 0).is_err());
        assert!(query_weights(&r, &[vec![]], &[1, 2], 0).is_err());
    }
}
