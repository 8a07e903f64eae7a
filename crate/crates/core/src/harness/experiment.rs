//! Replicated coverage experiments.

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::conformal::{take_allocation, unweighted_quantile, weighted_label_quantile, MethodKind, QuantileSolver};
use crate::error::{invalid, Error, Result};
use crate::fedopt::FedConfig;
use crate::labelshift::{
    default_subsample_params, mixture_label_dist, mle_ratios, multinomial_subsample, oracle_ratios, query_weights,
    LabelCounts, LabelDistribution, LikelihoodRatios,
};
use crate::privacy::{calibrate_sigma_g, privatize_counts};
use crate::scores::{aps_score, ingest_csv, score_shard, CalibrationShard, ClassifierOutput, ScoredExample};

use super::config::{DataSource, ExperimentConfig, ScoreFileSource};
use super::report::{CoverageReport, MethodSummary};
use super::seed::{stream_rng, Stream};
use super::synthetic::{gen_synthetic, sample_labels};

/// Calibration shards and a scored test set for one replication.
#[derive(Debug, Clone)]
pub struct ReplicationData {
    pub shards: Vec<CalibrationShard>,
    pub test_outputs: Vec<ClassifierOutput>,
    pub test_labels: Vec<usize>,
}

/// Per-method quantiles for every query label, shared by all test points.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodQuantiles {
    pub method: MethodKind,
    pub quantiles: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Outcome {
    coverage: f64,
    set_size: f64,
    degenerate: usize,
}

enum PreparedSource<'a> {
    Synthetic(&'a super::synthetic::SyntheticSpec),
    Pool {
        source: &'a ScoreFileSource,
        outputs: Vec<ClassifierOutput>,
        labels: Vec<usize>,
    },
}

/// Runs every replication and aggregates coverage per method. Results depend
/// only on the config (including its seed), not on the thread count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<CoverageReport> {
    config.validate()?;
    let prepared = match &config.data {
        DataSource::Synthetic(spec) => PreparedSource::Synthetic(spec),
        DataSource::ScoreFile(source) => {
            let (outputs, labels) = ingest_csv(&source.path, source.temperature)?;
            let k = source.label_dists[0].num_labels();
            if outputs.iter().any(|o| o.num_labels() != k) {
                return Err(invalid(format!(
                    "{}: classifier outputs do not have {k} labels",
                    source.path.display()
                )));
            }
            PreparedSource::Pool {
                source,
                outputs,
                labels,
            }
        }
    };

    let outcomes: Vec<Vec<Outcome>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let data = replication_data(config, &prepared, r)?;
            evaluate_replication(config, &data, r)
        })
        .collect::<Result<_>>()?;

    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            MethodSummary::new(
                method,
                outcomes.iter().map(|o| o[j].coverage).collect(),
                outcomes.iter().map(|o| o[j].set_size).collect(),
                outcomes.iter().map(|o| o[j].degenerate).collect(),
            )
        })
        .collect();
    Ok(CoverageReport {
        config: config.clone(),
        methods,
    })
}

fn replication_data(config: &ExperimentConfig, prepared: &PreparedSource<'_>, r: usize) -> Result<ReplicationData> {
    let mut rng = stream_rng(config.seed, r, Stream::Data);
    match prepared {
        PreparedSource::Synthetic(spec) => {
            let d = gen_synthetic(spec, config.target_agent, &mut rng)?;
            Ok(ReplicationData {
                shards: d.shards,
                test_outputs: d.test_outputs,
                test_labels: d.test_labels,
            })
        }
        PreparedSource::Pool {
            source,
            outputs,
            labels,
        } => resample_pool(source, outputs, labels, config.target_agent, &mut rng),
    }
}

/// Splits the pool in half at random, then draws each agent's calibration
/// points from the first half and the test points from the second, label by
/// label with replacement.
fn resample_pool<R: Rng + ?Sized>(
    source: &ScoreFileSource,
    outputs: &[ClassifierOutput],
    labels: &[usize],
    target: usize,
    rng: &mut R,
) -> Result<ReplicationData> {
    let k = source.label_dists[0].num_labels();
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.shuffle(rng);
    let (cal_half, test_half) = order.split_at(order.len() / 2);
    let by_label = |half: &[usize]| {
        let mut buckets = vec![Vec::new(); k];
        for &i in half {
            buckets[labels[i]].push(i);
        }
        buckets
    };
    let cal_buckets = by_label(cal_half);
    let test_buckets = by_label(test_half);

    let draw = |dist: &LabelDistribution, n: usize, buckets: &[Vec<usize>], rng: &mut R| -> Result<Vec<usize>> {
        sample_labels(dist, n, rng)?
            .into_iter()
            .map(|y| {
                buckets[y]
                    .choose(rng)
                    .copied()
                    .ok_or_else(|| invalid(format!("{}: no example with label {y} to draw", source.path.display())))
            })
            .collect()
    };

    let mut shards = Vec::with_capacity(source.cal_sizes.len());
    for (agent, (dist, &n)) in source.label_dists.iter().zip(&source.cal_sizes).enumerate() {
        let picks = draw(dist, n, &cal_buckets, rng)?;
        let outs: Vec<ClassifierOutput> = picks.iter().map(|&i| outputs[i].clone()).collect();
        let labs: Vec<usize> = picks.iter().map(|&i| labels[i]).collect();
        shards.push(CalibrationShard {
            agent,
            examples: score_shard(&outs, &labs, rng)?,
        });
    }
    let picks = draw(&source.label_dists[target], source.test_size, &test_buckets, rng)?;
    Ok(ReplicationData {
        shards,
        test_outputs: picks.iter().map(|&i| outputs[i].clone()).collect(),
        test_labels: picks.iter().map(|&i| labels[i]).collect(),
    })
}

/// Label counts each agent reports for ratio estimation.
fn training_counts(config: &ExperimentConfig, data: &ReplicationData, r: usize) -> Result<Vec<LabelCounts>> {
    let k = config.data.label_dists()[0].num_labels();
    match &config.train_sizes {
        None => Ok(data
            .shards
            .iter()
            .map(|s| LabelCounts::from_labels(s.agent, s.labels(), k))
            .collect()),
        Some(sizes) => {
            let mut rng = stream_rng(config.seed, r, Stream::TrainCounts);
            config
                .data
                .label_dists()
                .iter()
                .zip(sizes)
                .enumerate()
                .map(|(agent, (dist, &n))| Ok(LabelCounts::from_labels(agent, sample_labels(dist, n, &mut rng)?, k)))
                .collect()
        }
    }
}

/// Calibration ratios from the true label distributions, with agents mixed
/// in proportion to their calibration sizes.
pub fn true_ratios(config: &ExperimentConfig) -> Result<LikelihoodRatios> {
    let sizes = config.data.cal_sizes();
    let total: usize = sizes.iter().sum();
    let weighted: Vec<(f64, &LabelDistribution)> = sizes
        .iter()
        .zip(config.data.label_dists())
        .map(|(&n, d)| (n as f64 / total as f64, d))
        .collect();
    let cal = mixture_label_dist(&weighted)?;
    oracle_ratios(&config.data.label_dists()[config.target_agent], &cal)
}

/// Computes every configured method's per-label quantiles for one replication.
pub fn method_quantiles(config: &ExperimentConfig, data: &ReplicationData, r: usize) -> Result<Vec<MethodQuantiles>> {
    let k = config.data.label_dists()[0].num_labels();
    let alpha = config.alpha;
    let sizes: Vec<usize> = data.shards.iter().map(|s| s.len()).collect();
    let wants = |m: MethodKind| config.methods.contains(&m);

    // one retained subsample per query label, shared by the weighted methods
    let needs_subsample = [
        MethodKind::OracleWeights,
        MethodKind::EstimatedWeights,
        MethodKind::DpFedCp,
    ]
    .into_iter()
    .any(wants);
    let subsamples: Vec<Vec<Vec<ScoredExample>>> = if needs_subsample {
        let mut rng = stream_rng(config.seed, r, Stream::Subsample);
        let (n_bar, pi) = default_subsample_params(&sizes)?;
        let draws = if config.shared_subsample { 1 } else { k };
        let mut taken = (0..draws)
            .map(|_| {
                let allocation = multinomial_subsample(n_bar, &pi, &mut rng)?;
                take_allocation(&data.shards, &allocation, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        if config.shared_subsample {
            taken = vec![taken.remove(0); k];
        }
        taken
    } else {
        Vec::new()
    };

    let exact = |ratios: &LikelihoodRatios| -> Result<Vec<Option<f64>>> {
        // the exact solver draws no randomness
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        (0..k)
            .map(|y| {
                weighted_label_quantile(
                    ratios,
                    &subsamples[y],
                    &sizes,
                    y,
                    alpha,
                    &QuantileSolver::Exact,
                    &mut unused,
                )
            })
            .collect()
    };

    let counts = if wants(MethodKind::EstimatedWeights) || wants(MethodKind::DpFedCp) {
        training_counts(config, data, r)?
    } else {
        Vec::new()
    };

    let mut out = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let quantiles = match method {
            MethodKind::UnweightedLocal => {
                let scores: Vec<f64> = data.shards[config.target_agent]
                    .examples
                    .iter()
                    .map(|e| e.score)
                    .collect();
                vec![Some(unweighted_quantile(&scores, alpha)?); k]
            }
            MethodKind::UnweightedGlobal => {
                let scores: Vec<f64> = data
                    .shards
                    .iter()
                    .flat_map(|s| s.examples.iter().map(|e| e.score))
                    .collect();
                vec![Some(unweighted_quantile(&scores, alpha)?); k]
            }
            MethodKind::OracleWeights => exact(&true_ratios(config)?)?,
            MethodKind::EstimatedWeights => exact(&mle_ratios(&counts, config.target_agent)?)?,
            MethodKind::DpFedCp => dp_fed_cp_quantiles(config, &counts, &subsamples, &sizes, r)?,
        };
        out.push(MethodQuantiles { method, quantiles });
    }
    Ok(out)
}

/// Gradient noise for DP-FedCP: calibrated from the budget with the largest
/// mixture weight over all query labels, or the configured raw value.
fn dp_fed_config(
    config: &ExperimentConfig,
    ratios: &LikelihoodRatios,
    subsamples: &[Vec<Vec<ScoredExample>>],
    sizes: &[usize],
) -> Result<FedConfig> {
    let mut fed = config.fed.clone();
    let Some(budget) = &config.privacy else {
        return Ok(fed);
    };
    let mut lambda_max = 0.0f64;
    for (y, taken) in subsamples.iter().enumerate() {
        match query_weights(ratios, taken, sizes, y) {
            Ok(w) => lambda_max = lambda_max.max(w.lambda_max()),
            Err(Error::DegenerateWeights { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let n = sizes.len();
    let s = fed.subsample_size.unwrap_or(n);
    fed.noise_std = calibrate_sigma_g(budget, fed.rounds, fed.local_steps, s, n, lambda_max)?.sigma_g;
    Ok(fed)
}

fn dp_fed_cp_quantiles(
    config: &ExperimentConfig,
    counts: &[LabelCounts],
    subsamples: &[Vec<Vec<ScoredExample>>],
    sizes: &[usize],
    r: usize,
) -> Result<Vec<Option<f64>>> {
    let sigma = config.privacy.map_or(0.0, |b| b.count_noise_std);
    let mut rng = stream_rng(config.seed, r, Stream::CountNoise);
    let noisy: Vec<LabelCounts> = counts.iter().map(|c| privatize_counts(c, sigma, &mut rng)).collect();
    let ratios = mle_ratios(&noisy, config.target_agent)?;
    let fed = dp_fed_config(config, &ratios, subsamples, sizes)?;
    let solver = QuantileSolver::Federated(fed);
    subsamples
        .iter()
        .enumerate()
        .map(|(y, taken)| {
            let mut rng = stream_rng(config.seed, r, Stream::Optimizer(y));
            weighted_label_quantile(&ratios, taken, sizes, y, config.alpha, &solver, &mut rng)
        })
        .collect()
}

/// Candidate-label scores `V(x, y')` for every test point, with a fresh
/// uniform draw per pair.
pub fn test_score_matrix(config: &ExperimentConfig, data: &ReplicationData, r: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = stream_rng(config.seed, r, Stream::TestScores);
    data.test_outputs
        .iter()
        .map(|out| {
            (0..out.num_labels())
                .map(|y| aps_score(out, y, rng.random::<f64>()))
                .collect()
        })
        .collect()
}

fn evaluate_replication(config: &ExperimentConfig, data: &ReplicationData, r: usize) -> Result<Vec<Outcome>> {
    let quantiles = method_quantiles(config, data, r)?;
    let scores = test_score_matrix(config, data, r)?;
    let n_test = data.test_labels.len().max(1) as f64;
    Ok(quantiles
        .iter()
        .map(|mq| {
            let mut covered = 0usize;
            let mut total_size = 0usize;
            for (row, &y) in scores.iter().zip(&data.test_labels) {
                let included = |label: usize| mq.quantiles[label].is_some_and(|q| row[label] <= q);
                covered += usize::from(included(y));
                total_size += (0..row.len()).filter(|&l| included(l)).count();
            }
            Outcome {
                coverage: covered as f64 / n_test,
                set_size: total_size as f64 / n_test,
                degenerate: mq.quantiles.iter().filter(|q| q.is_none()).count(),
            }
        })
        .collect())
}

/// Data for replication `r`, as used by [`run_experiment`].
pub fn replication(config: &ExperimentConfig, r: usize) -> Result<ReplicationData> {
    config.validate()?;
    match &config.data {
        DataSource::Synthetic(spec) => replication_data(config, &PreparedSource::Synthetic(spec), r),
        DataSource::ScoreFile(source) => {
            let (outputs, labels) = ingest_csv(&source.path, source.temperature)?;
            replication_data(
                config,
                &PreparedSource::Pool {
                    source,
                    outputs,
                    labels,
                },
                r,
            )
        }
    }
}
