//! Closed-form hitting laws, goodness-of-fit statistics and the probability
//! accounting behind the excursion search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::bm_path::{first_hit, BrownianPath, Direction, PathError};
use crate::excursions::{find_good_excursion, ExcursionError, ShapeParams};
use crate::rng::derive_seed;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error("a = {a:e} is too large: floor(a^(-1/4)) = 0")]
    NoExcursionBudget { a: f64 },
    #[error("parameter out of range: {0}")]
    OutOfRange(&'static str),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Excursion(Box<ExcursionError>),
}

impl From<ExcursionError> for StatsError {
    fn from(e: ExcursionError) -> Self {
        match e {
            ExcursionError::Path(p) => StatsError::Path(p),
            ExcursionError::Stats(s) => s,
            other => StatsError::Excursion(Box::new(other)),
        }
    }
}

/// Density of the first hitting time of level 1 by a standard Brownian motion.
pub fn levy_pdf(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    (-0.5 / t).exp() / (2.0 * std::f64::consts::PI * t * t * t).sqrt()
}

/// `P(T_1 <= t) = 2 (1 - Φ(1/√t)) = erfc(1/√(2t))`.
pub fn levy_cdf(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    erfc((0.5 / t).sqrt())
}

/// `P(T_a <= t)` using `T_a = a² T_1` in law.
pub fn hitting_cdf(a: f64, t: f64) -> f64 {
    levy_cdf(t / (a * a))
}

/// Monte-Carlo proportion with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub n: u64,
    pub successes: u64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl McEstimate {
    pub fn from_counts(successes: u64, n: u64) -> Result<Self, StatsError> {
        if n == 0 {
            return Err(StatsError::NoTrials);
        }
        assert!(successes <= n);
        let (ci_lo, ci_hi) = wilson_interval(successes, n, Z95);
        Ok(Self {
            mean: successes as f64 / n as f64,
            n,
            successes,
            ci_lo,
            ci_hi,
        })
    }

    /// Binomial standard error at the observed mean.
    pub fn sigma(&self) -> f64 {
        (self.mean * (1.0 - self.mean) / self.n as f64).sqrt()
    }

    /// Whether the two confidence intervals intersect.
    pub fn overlaps(&self, other: &McEstimate) -> bool {
        self.ci_lo <= other.ci_hi && other.ci_lo <= self.ci_hi
    }
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

/// One-sample Kolmogorov-Smirnov distance between `samples` and `cdf`.
///
/// `total` counts all trials; trials that did not finish before `horizon` are
/// censored, so the empirical CDF is `#(x <= t) / total` on `[0, horizon]`
/// and the supremum is taken there.
pub fn ks_one_sample(samples: &[f64], total: usize, horizon: f64, cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs: Vec<f64> = samples.iter().copied().filter(|&x| x <= horizon).collect();
    xs.sort_by(f64::total_cmp);
    let n = total as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        let x = xs[i];
        let before = i as f64 / n;
        while i < xs.len() && xs[i] == x {
            i += 1;
        }
        let after = i as f64 / n;
        let f = cdf(x);
        d = d.max((after - f).abs()).max((f - before).abs());
    }
    if horizon.is_finite() {
        d = d.max((cdf(horizon) - xs.len() as f64 / n).abs());
    }
    d
}

/// Two-sample Kolmogorov-Smirnov distance with censoring at `horizon`.
pub fn ks_two_sample(a: &[f64], total_a: usize, b: &[f64], total_b: usize, horizon: f64) -> f64 {
    let mut xs: Vec<f64> = a.iter().copied().filter(|&x| x <= horizon).collect();
    let mut ys: Vec<f64> = b.iter().copied().filter(|&x| x <= horizon).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (na, nb) = (total_a as f64, total_b as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xs.len() || j < ys.len() {
        let x = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < xs.len() && xs[i] <= x {
            i += 1;
        }
        while j < ys.len() && ys[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 95% critical value of the one-sample KS statistic.
pub fn ks_critical_95(n: usize) -> f64 {
    1.358 / (n as f64).sqrt()
}

/// `floor(a^(-1/4))`, exact at perfect fourth powers.
pub fn excursion_budget(a: f64) -> u64 {
    let mut k = a.powf(-0.25).floor().max(0.0) as u64;
    while k > 0 && (k as f64).powi(4) * a > 1.0 {
        k -= 1;
    }
    while ((k + 1) as f64).powi(4) * a <= 1.0 {
        k += 1;
    }
    k
}

/// Failure-probability accounting for the good-shape search at scale `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaBound {
    pub a: f64,
    pub r: f64,
    /// Number of excursions inspected, `floor(a^(-1/4))`.
    pub k: u64,
    /// `(1 - r)^k`: none of the first k excursions has a good shape.
    pub shape_term: f64,
    /// `sqrt(2/π) 2k a^(3/8)`: the first k excursions do not finish in time.
    pub time_term: f64,
    /// `shape_term + time_term`.
    pub p_fail_bound: f64,
    /// The simplified bound `2 a^(1/8)`.
    pub simplified_bound: f64,
    pub within_simplified: bool,
}

pub fn lemma_bound(a: f64, r: f64) -> Result<LemmaBound, StatsError> {
    if !(a > 0.0) {
        return Err(StatsError::OutOfRange("a must be positive"));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(StatsError::OutOfRange("r must lie in (0, 1)"));
    }
    let k = excursion_budget(a);
    if k == 0 {
        return Err(StatsError::NoExcursionBudget { a });
    }
    let shape_term = (1.0 - r).powf(k as f64);
    let time_term = (2.0 / std::f64::consts::PI).sqrt() * 2.0 * k as f64 * a.powf(0.375);
    let p_fail_bound = shape_term + time_term;
    let simplified_bound = 2.0 * a.powf(0.125);
    Ok(LemmaBound {
        a,
        r,
        k,
        shape_term,
        time_term,
        p_fail_bound,
        simplified_bound,
        within_simplified: p_fail_bound <= simplified_bound,
    })
}

/// Simulated first hitting times of `level_value` from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingSample {
    pub target: f64,
    /// Completed hitting times.
    pub times: Vec<f64>,
    pub trials: usize,
    pub horizon: f64,
}

impl HittingSample {
    pub fn censored(&self) -> usize {
        self.trials - self.times.len()
    }
}

/// First grid hitting times of `target` on `trials` independent paths
/// seeded by `derive_seed(seed, i)`, grid level `level`, search stopped at
/// `horizon`.
pub fn sample_hitting_times(
    seed: u64,
    trials: usize,
    target: f64,
    level: i32,
    horizon: f64,
) -> Result<HittingSample, StatsError> {
    if trials == 0 {
        return Err(StatsError::NoTrials);
    }
    let hits: Vec<Option<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let path = BrownianPath::new(derive_seed(seed, i));
            first_hit(&path, target, 0.0, Direction::Forward, level, horizon)
        })
        .collect::<Result<_, _>>()?;
    Ok(HittingSample {
        target,
        times: hits.into_iter().flatten().collect(),
        trials,
        horizon,
    })
}

/// Horizon (in units of `T_1`) used by the hitting-law checks.
pub const HITTING_HORIZON: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub statistic: f64,
    pub trials: usize,
    pub completed: usize,
    pub critical_95: f64,
}

/// One-sample KS of simulated `T_1` against the Lévy CDF.
pub fn levy_ks(seed: u64, trials: usize, level: i32) -> Result<KsReport, StatsError> {
    let s = sample_hitting_times(seed, trials, 1.0, level, HITTING_HORIZON)?;
    Ok(KsReport {
        statistic: ks_one_sample(&s.times, trials, HITTING_HORIZON, levy_cdf),
        trials,
        completed: s.times.len(),
        critical_95: ks_critical_95(trials),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub a: f64,
    /// Two-sample KS between `T_a / a²` and `T_1`.
    pub statistic: f64,
    pub trials: usize,
    pub completed_a: usize,
    pub completed_1: usize,
}

/// Seed stream for the reference `T_1` sample, disjoint from the `T_a` one.
const REFERENCE_STREAM: u64 = 0x7431_5F72_6566;

/// Checks `T_a = a² T_1` in law by a two-sample KS test.
pub fn hitting_scaling_check(
    seed: u64,
    trials: usize,
    a: f64,
    level: i32,
) -> Result<ScalingReport, StatsError> {
    if !(a > 0.0) {
        return Err(StatsError::OutOfRange("a must be positive"));
    }
    let sa = sample_hitting_times(seed, trials, a, level, HITTING_HORIZON * a * a)?;
    let s1 = sample_hitting_times(derive_seed(seed, REFERENCE_STREAM), trials, 1.0, level, HITTING_HORIZON)?;
    let scaled: Vec<f64> = sa.times.iter().map(|t| t / (a * a)).collect();
    Ok(ScalingReport {
        a,
        statistic: ks_two_sample(&scaled, trials, &s1.times, trials, HITTING_HORIZON),
        trials,
        completed_a: sa.times.len(),
        completed_1: s1.times.len(),
    })
}

/// Empirical success of the good-shape search next to its analytic bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub a: f64,
    pub empirical: McEstimate,
    /// `1 - lemma_bound(a, r̂)`.
    pub analytic: f64,
    /// `1 - lemma_bound(a, r̂_lo)`, conservative in r.
    pub analytic_conservative: f64,
    /// `1 - 2 a^(1/8)`.
    pub simplified: f64,
    /// The simplified bound is negative, i.e. says nothing.
    pub simplified_vacuous: bool,
    pub bound: LemmaBound,
}

impl LemmaReport {
    /// Empirical success clears the conservative analytic bound up to 3σ.
    pub fn consistent(&self) -> bool {
        self.empirical.mean >= self.analytic_conservative - 3.0 * self.empirical.sigma()
    }
}

/// Runs the good-shape search with `[u, v] = [a/3, 2a/3]` on fresh paths.
pub fn verify_lemma_probability(
    seed: u64,
    a: f64,
    trials: usize,
    r: &McEstimate,
    shape: &ShapeParams,
    level: i32,
) -> Result<LemmaReport, StatsError> {
    if trials == 0 {
        return Err(StatsError::NoTrials);
    }
    let (u, v) = (a / 3.0, 2.0 * a / 3.0);
    let outcomes: Vec<bool> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let path = BrownianPath::new(derive_seed(seed, i));
            find_good_excursion(&path, u, v, a, shape, level).map(|(w, _)| w.is_some())
        })
        .collect::<Result<_, _>>()?;
    let successes = outcomes.iter().filter(|&&s| s).count() as u64;
    let empirical = McEstimate::from_counts(successes, trials as u64)?;
    let r_hat = r.mean.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    let r_lo = r.ci_lo.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    let bound = lemma_bound(a, r_hat)?;
    let conservative = lemma_bound(a, r_lo)?;
    let simplified = 1.0 - bound.simplified_bound;
    Ok(LemmaReport {
        a,
        empirical,
        analytic: 1.0 - bound.p_fail_bound,
        analytic_conservative: 1.0 - conservative.p_fail_bound,
        simplified,
        simplified_vacuous: simplified < 0.0,
        bound,
    })
}
