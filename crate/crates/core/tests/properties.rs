use iterated_bm::bm_path::{range_enclosure, BrownianPath, IntervalEnclosure};
use iterated_bm::cli::ExperimentConfig;
use iterated_bm::flow::{image, PathStack};
use iterated_bm::stats::{levy_cdf, lemma_bound, McEstimate};
use iterated_bm::witness::p_eps;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn values_ignore_query_order(
        seed in any::<u64>(),
        queries in prop::collection::vec((-4.0f64..4.0, 0i32..40), 1..24),
    ) {
        let a = BrownianPath::new(seed);
        let b = BrownianPath::new(seed);
        let forward: Vec<u64> = queries.iter().map(|&(t, l)| a.eval(t, l).unwrap().value.to_bits()).collect();
        let mut backward: Vec<u64> = queries.iter().rev().map(|&(t, l)| b.eval(t, l).unwrap().value.to_bits()).collect();
        backward.reverse();
        prop_assert_eq!(forward, backward);
    }

    #[test]
    fn enclosures_nest_across_levels(seed in 0u64..1000, lo in -3.0f64..3.0, width in 1e-6f64..4.0, level in 0i32..10) {
        let p = BrownianPath::new(seed);
        let coarse = range_enclosure(&p, lo, lo + width, level).unwrap();
        let fine = range_enclosure(&p, lo, lo + width, level + 1).unwrap();
        prop_assert!(coarse.is_well_formed() && fine.is_well_formed());
        prop_assert!(coarse.resolution > 0.0);
        prop_assert!(fine.outer_lo <= coarse.inner_lo && coarse.inner_hi <= fine.outer_hi);
        prop_assert!(fine.inflation <= coarse.inflation);
    }

    #[test]
    fn images_grow_with_the_interval(seed in 0u64..1000, lo in -1.0f64..-0.1, hi in 0.1f64..1.0, grow in 0.0f64..1.0) {
        let stack = PathStack::new(seed, 1).unwrap();
        let p = stack.path(1).unwrap();
        // dyadic endpoints keep both images on one grid
        let q = |x: f64| (x * 64.0).round() / 64.0;
        let small = IntervalEnclosure::exact(q(lo), q(hi));
        let big = IntervalEnclosure::exact(q(lo - grow), q(hi + grow));
        let (a, b) = (image(p, &small, 12).unwrap(), image(p, &big, 12).unwrap());
        prop_assert!(a.inner_lo <= 0.0 && 0.0 <= a.inner_hi);
        prop_assert!(b.outer_lo <= a.inner_lo && a.inner_hi <= b.outer_hi);
    }

    #[test]
    fn p_eps_is_a_nonincreasing_probability(x in 1e-30f64..0.999, y in 1e-30f64..0.999) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let (a, b) = (p_eps(lo, 1e-17).unwrap().value, p_eps(hi, 1e-17).unwrap().value);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        prop_assert!(b <= a + 1e-15);
    }

    #[test]
    fn lemma_budget_brackets_a(log_a in -30.0f64..-0.01, r in 1e-6f64..0.999) {
        let a = 10f64.powf(log_a);
        let b = lemma_bound(a, r).unwrap();
        let k = b.k as f64;
        prop_assert!(k.powi(4) * a <= 1.0 && (k + 1.0).powi(4) * a > 1.0);
        prop_assert!(b.p_fail_bound > 0.0);
    }

    #[test]
    fn levy_cdf_is_a_cdf(s in 1e-3f64..1e4, t in 1e-3f64..1e4) {
        let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
        prop_assert!(levy_cdf(lo) <= levy_cdf(hi));
        prop_assert!(levy_cdf(lo) > 0.0 && levy_cdf(hi) < 1.0);
    }

    #[test]
    fn wilson_brackets_the_mean(n in 1u64..100_000, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).floor() as u64;
        let e = McEstimate::from_counts(k, n).unwrap();
        prop_assert!(e.ci_lo <= e.mean && e.mean <= e.ci_hi);
        prop_assert!(0.0 <= e.ci_lo && e.ci_hi <= 1.0);
    }

    #[test]
    fn configs_round_trip(
        seed in 0u64..(1 << 62),
        eps in 1e-30f64..0.5,
        depth in 0usize..4,
        level in 0i32..20,
        trials in 1usize..1_000_000,
    ) {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        c.witness.epsilon = eps;
        c.witness.depth = depth;
        c.witness.search_level = level;
        c.stats.r_trials = trials;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }
}
