use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedconform::conformal::{permutation_weight_oracle, predict_weighted, PredictionSet, QuantileSolver};
use fedconform::labelshift::{
    mixture_label_dist, mle_ratios, multinomial_subsample, oracle_ratios, query_weights, LabelCounts,
    LabelDistribution, LikelihoodRatios,
};
use fedconform::moreau::{
    moreau_env, pinball, pinball_loss, smoothed_grad, smoothed_loss, smoothed_quantile_reference, PinballParams,
};
use fedconform::privacy::{admissible_delta_upper, calibrate_sigma_g, privatize_counts, PrivacyBudget};
use fedconform::scores::{aps_score, CalibrationShard, ClassifierOutput, ScoredExample};
use fedconform::weighted_dist::WeightedEmpiricalDistribution;

fn atoms(max_len: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..=1.0f64, 0.01..1.0f64), 1..=max_len)
}

fn dist_from(pairs: &[(f64, f64)]) -> WeightedEmpiricalDistribution {
    WeightedEmpiricalDistribution::new(pairs.iter().copied())
        .unwrap()
        .normalize()
}

fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn examples(max_len: usize) -> impl Strategy<Value = Vec<ScoredExample>> {
    prop::collection::vec(
        (0.0..=1.0f64, 0..3usize).prop_map(|(score, label)| ScoredExample { score, label }),
        0..=max_len,
    )
}

proptest! {
    #[test]
    fn quantile_is_monotone_in_level(pairs in atoms(40), b1 in 0.0..=1.0f64, b2 in 0.0..=1.0f64) {
        let d = dist_from(&pairs);
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(d.quantile(lo).unwrap() <= d.quantile(hi).unwrap());
    }

    #[test]
    fn quantile_is_the_smallest_atom_reaching_the_level(pairs in atoms(40), beta in 0.001..=1.0f64) {
        let d = dist_from(&pairs);
        let q = d.quantile(beta).unwrap();
        prop_assert!(d.atoms().iter().any(|a| a.value == q));
        let mut acc = 0.0;
        for a in d.atoms() {
            acc += a.weight;
            if a.value < q {
                prop_assert!(acc < beta);
            }
        }
        prop_assert!(d.cdf(q) >= beta - 1e-9);
    }

    #[test]
    fn equal_weights_match_order_statistic(scores in prop::collection::vec(0.0..1.0f64, 1..=50), beta in 0.0..=1.0f64) {
        let d = WeightedEmpiricalDistribution::from_scores_uniform(&scores, true).unwrap();
        let mut sorted = scores.clone();
        sorted.push(1.0);
        sorted.sort_by(f64::total_cmp);
        let n = scores.len() as f64;
        let rank = ((beta * (n + 1.0)).ceil() as usize).clamp(1, sorted.len());
        let q = d.quantile(beta).unwrap();
        // a level within rounding of k/(N+1) may resolve to either neighbour
        let k = beta * (n + 1.0);
        if (k - k.round()).abs() > 1e-9 {
            prop_assert_eq!(q, sorted[rank - 1]);
        }
    }

    #[test]
    fn tiny_weight_perturbations_keep_the_atom(pairs in atoms(30), beta in 0.01..0.99f64, seed in any::<u64>()) {
        let d = dist_from(&pairs);
        prop_assume!(!d.level_is_degenerate(beta, 1e-9));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perturbed: Vec<(f64, f64)> = d
            .atoms()
            .iter()
            .map(|a| (a.value, a.weight + rand::Rng::random_range(&mut rng, -1e-13..1e-13)))
            .collect();
        let p = dist_from(&perturbed);
        prop_assert_eq!(d.quantile(beta).unwrap(), p.quantile(beta).unwrap());
    }

    #[test]
    fn aps_is_monotone_in_u(p in probs(5), label in 0..5usize, u1 in 0.0..=1.0f64, u2 in 0.0..=1.0f64) {
        let out = ClassifierOutput::new(p).unwrap();
        let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        let a = aps_score(&out, label, lo).unwrap();
        let b = aps_score(&out, label, hi).unwrap();
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    }

    #[test]
    fn aps_extremes(p in probs(4)) {
        let mut sorted = p.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
        let out = ClassifierOutput::new(p.clone()).unwrap();
        let top = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let bottom = p.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(aps_score(&out, top, 0.0).unwrap(), 0.0);
        prop_assert!((aps_score(&out, bottom, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aps_ignores_order_of_less_likely_labels(p in probs(6), label in 0..6usize, u in 0.0..=1.0f64, seed in any::<u64>()) {
        let smaller: Vec<usize> = (0..6).filter(|&j| p[j] < p[label]).collect();
        let mut shuffled = smaller.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let mut q = p.clone();
        for (&from, &to) in smaller.iter().zip(&shuffled) {
            q[to] = p[from];
        }
        let a = aps_score(&ClassifierOutput::new(p).unwrap(), label, u).unwrap();
        let b = aps_score(&ClassifierOutput::new(q).unwrap(), label, u).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn envelope_lies_below_pinball_and_shares_its_minimizer(
        v in 0.0..=1.0f64, q in -0.5..1.5f64, alpha in 0.01..0.99f64, gamma in 1e-4..0.5f64,
    ) {
        let params = PinballParams::new(alpha, gamma).unwrap();
        prop_assert!(moreau_env(&params, v, q) <= pinball(&params, v, q) + 1e-15);
        prop_assert_eq!(moreau_env(&params, v, v), 0.0);
        if q != v {
            prop_assert!(moreau_env(&params, v, q) > 0.0);
        }
    }

    #[test]
    fn smoothed_loss_is_convex(pairs in atoms(30), alpha in 0.01..0.99f64, gamma in 1e-4..0.5f64,
                               q1 in -0.5..1.5f64, q2 in -0.5..1.5f64, t in 0.0..=1.0f64) {
        let d = dist_from(&pairs);
        let params = PinballParams::new(alpha, gamma).unwrap();
        let mid = t * q1 + (1.0 - t) * q2;
        let lhs = smoothed_loss(&d, &params, mid);
        let rhs = t * smoothed_loss(&d, &params, q1) + (1.0 - t) * smoothed_loss(&d, &params, q2);
        prop_assert!(lhs <= rhs + 1e-12);
    }

    #[test]
    fn smoothed_grad_is_monotone_and_lipschitz(pairs in atoms(30), alpha in 0.01..0.99f64, gamma in 1e-4..0.5f64,
                                               q1 in -0.5..1.5f64, q2 in -0.5..1.5f64) {
        let d = dist_from(&pairs);
        let params = PinballParams::new(alpha, gamma).unwrap();
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let (g_lo, g_hi) = (smoothed_grad(&d, &params, lo), smoothed_grad(&d, &params, hi));
        prop_assert!(g_lo <= g_hi + 1e-12);
        prop_assert!(g_hi - g_lo <= (hi - lo) / gamma + 1e-9);
        prop_assert!(g_lo >= -(1.0 - alpha) - 1e-12 && g_hi <= alpha + 1e-12);
    }

    #[test]
    fn minimizers_agree_with_grid_search(pairs in atoms(20), alpha in 0.05..0.95f64, gamma in 1e-3..0.05f64) {
        let d = dist_from(&pairs);
        prop_assume!(!d.level_is_degenerate(1.0 - alpha, 1e-6));
        let params = PinballParams::new(alpha, gamma).unwrap();
        let exact = d.quantile(1.0 - alpha).unwrap();
        let smoothed = smoothed_quantile_reference(&d, &params).unwrap().value;
        prop_assert!((smoothed - exact).abs() <= gamma);
        let at_exact = pinball_loss(&d, &params, exact);
        let at_smoothed = smoothed_loss(&d, &params, smoothed);
        for i in 0..=400 {
            let q = -0.2 + 1.4 * i as f64 / 400.0;
            prop_assert!(at_exact <= pinball_loss(&d, &params, q) + 1e-12);
            prop_assert!(at_smoothed <= smoothed_loss(&d, &params, q) + 1e-12);
        }
    }

    #[test]
    fn query_weights_are_scale_invariant_and_sum_to_one(
        w in prop::collection::vec(0.1..5.0f64, 3), c in 0.01..100.0f64,
        a in examples(20), b in examples(20), query in 0..3usize,
    ) {
        let taken = vec![a, b];
        let sizes: Vec<usize> = taken.iter().map(|t| t.len() + 3).collect();
        let ratios = LikelihoodRatios::new(w).unwrap();
        let base = query_weights(&ratios, &taken, &sizes, query).unwrap();
        let scaled = query_weights(&ratios.scaled(c).unwrap(), &taken, &sizes, query).unwrap();
        prop_assert!((base.lambdas.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!((base.global.total_weight() - 1.0).abs() <= 1e-9);
        for (x, y) in base.lambdas.iter().zip(&scaled.lambdas) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((base.sentinel_weight - scaled.sentinel_weight).abs() <= 1e-12);
        for (x, y) in base.global.atoms().iter().zip(scaled.global.atoms()) {
            prop_assert_eq!(x.value, y.value);
            prop_assert!((x.weight - y.weight).abs() <= 1e-12);
        }
        let rebuilt = base.reconstruct().unwrap();
        for atom in base.global.atoms() {
            prop_assert!((rebuilt.cdf(atom.value) - base.global.cdf(atom.value)).abs() <= 1e-9);
        }
    }

    #[test]
    fn mle_ratios_approach_oracle_ratios(p1 in probs(4), p2 in probs(4), target in 0..2usize) {
        let dists = [LabelDistribution::new(p1).unwrap(), LabelDistribution::new(p2).unwrap()];
        let counts: Vec<LabelCounts> = dists
            .iter()
            .enumerate()
            .map(|(agent, d)| LabelCounts {
                agent,
                counts: d.probs().iter().map(|p| (1e6 * p).round() as u64).collect(),
            })
            .collect();
        let cal = mixture_label_dist(&[(0.5, &dists[0]), (0.5, &dists[1])]).unwrap();
        let oracle = oracle_ratios(&dists[target], &cal).unwrap();
        let mle = mle_ratios(&counts, target).unwrap();
        for y in 0..4 {
            prop_assert!((mle.get(y) - oracle.get(y)).abs() <= 1e-3);
        }
    }

    #[test]
    fn multinomial_allocations_sum_to_total(total in 1..500usize, pi in probs(4), seed in any::<u64>()) {
        let alloc = multinomial_subsample(total, &pi, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(alloc.per_agent.iter().sum::<usize>(), total);
    }

    #[test]
    fn weighted_sets_are_nested_and_scale_invariant(
        a in examples(25), b in examples(25), w in prop::collection::vec(0.1..5.0f64, 3),
        c in 0.01..100.0f64, x in prop::collection::vec(0.0..=1.0f64, 3), seed in any::<u64>(),
    ) {
        let shards = vec![
            CalibrationShard { agent: 0, examples: a },
            CalibrationShard { agent: 1, examples: b },
        ];
        prop_assume!(shards.iter().any(|s| !s.is_empty()));
        let alloc = fedconform::labelshift::SubsampleAllocation {
            per_agent: shards.iter().map(|s| s.len()).collect(),
            total: shards.iter().map(|s| s.len()).sum(),
        };
        let ratios = LikelihoodRatios::new(w).unwrap();
        let predict = |r: &LikelihoodRatios, alpha: f64| -> PredictionSet {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            predict_weighted(&shards, r, &alloc, &x, alpha, &QuantileSolver::Exact, &mut rng).unwrap()
        };
        let mut previous: Option<PredictionSet> = None;
        for alpha in [0.0, 0.05, 0.1, 0.2, 0.4, 0.7] {
            let set = predict(&ratios, alpha);
            prop_assert_eq!(&set, &predict(&ratios.scaled(c).unwrap(), alpha));
            if let Some(prev) = &previous {
                prop_assert!(set.labels.iter().all(|y| prev.contains(*y)));
            }
            previous = Some(set);
        }
    }

    #[test]
    fn permutation_weights_form_a_distribution(
        cal in prop::collection::vec((0..2usize, 0..3usize), 0..=4), test_label in 0..3usize,
        w0 in prop::collection::vec(0.1..3.0f64, 3), w1 in prop::collection::vec(0.1..3.0f64, 3),
        wt in prop::collection::vec(0.1..3.0f64, 3),
    ) {
        let agents = [LikelihoodRatios::new(w0).unwrap(), LikelihoodRatios::new(w1).unwrap()];
        let p = permutation_weight_oracle(&cal, test_label, &agents, &LikelihoodRatios::new(wt).unwrap()).unwrap();
        prop_assert_eq!(p.len(), cal.len() + 1);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));

        let ones = [LikelihoodRatios::ones(3), LikelihoodRatios::ones(3)];
        let uniform = permutation_weight_oracle(&cal, test_label, &ones, &LikelihoodRatios::ones(3)).unwrap();
        let expected = 1.0 / (cal.len() + 1) as f64;
        prop_assert!(uniform.iter().all(|&x| (x - expected).abs() <= 1e-12));
    }

    #[test]
    fn privatized_counts_stay_positive(counts in prop::collection::vec(0..20u64, 1..8), sigma in 0.0..10.0f64, seed in any::<u64>()) {
        let c = LabelCounts { agent: 0, counts };
        let noisy = privatize_counts(&c, sigma, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(noisy.counts.len(), c.counts.len());
        prop_assert!(noisy.counts.iter().all(|&m| m >= 1));
    }

    #[test]
    fn calibrated_noise_is_monotone(
        eps in 0.5..8.0f64, log_delta in -9.0..-4.0f64, rounds in 20..400usize, k in 1..40usize,
        n in 10..100usize, s_frac in 0.5..1.0f64, lambda in 0.05..1.0f64,
    ) {
        let s = ((n as f64 * s_frac) as usize).clamp(1, n);
        let delta = 10f64.powf(log_delta);
        let sigma = |eps: f64, rounds: usize, k: usize, s: usize, n: usize, lambda: f64| {
            if delta >= admissible_delta_upper(eps, rounds, s, n) {
                return None;
            }
            let budget = PrivacyBudget::new(eps, delta, 0.0).unwrap();
            Some(calibrate_sigma_g(&budget, rounds, k, s, n, lambda).unwrap())
        };
        let Some(base) = sigma(eps, rounds, k, s, n, lambda) else { return Ok(()) };
        prop_assert!(base.delta_bar > 0.0 && base.delta_bar < 1.0);
        let base = base.sigma_g;
        if let Some(c) = sigma(eps * 2.0, rounds, k, s, n, lambda) { prop_assert!(c.sigma_g <= base); }
        if let Some(c) = sigma(eps, rounds, k, s, n + 7, lambda) { prop_assert!(c.sigma_g <= base); }
        if let Some(c) = sigma(eps, rounds + 7, k, s, n, lambda) { prop_assert!(c.sigma_g >= base); }
        if let Some(c) = sigma(eps, rounds, k + 1, s, n, lambda) { prop_assert!(c.sigma_g >= base); }
        if s < n {
            if let Some(c) = sigma(eps, rounds, k, s + 1, n, lambda) { prop_assert!(c.sigma_g >= base); }
        }
        if let Some(c) = sigma(eps, rounds, k, s, n, lambda * 1.5) { prop_assert!(c.sigma_g >= base); }
    }
}
