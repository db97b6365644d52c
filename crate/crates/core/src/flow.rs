//! Iterated Brownian flows: stacks of paths, iterated evaluation, images of
//! intervals, limit intervals and finite-depth threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm_path::{
    hausdorff, range_enclosure, range_enclosure_window, BrownianPath, DyadicTime, IntervalEnclosure, PathConfig,
    PathError,
};
use crate::rng::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("a path stack needs depth >= 1")]
    EmptyStack,
    #[error("path index {index} outside 1..={depth}")]
    IndexOutOfRange { index: usize, depth: usize },
    #[error("interval [{lo:e}, {hi:e}] must contain 0 and be nondegenerate")]
    BadInterval { lo: f64, hi: f64 },
    #[error("enclosure is malformed")]
    MalformedEnclosure,
    #[error("threads have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Path(#[from] PathError),
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;

/// The paths `B_1, ..., B_depth`; `B_i` has seed `derive_seed(seed, i)`.
#[derive(Debug, Clone)]
pub struct PathStack {
    seed: u64,
    paths: Vec<BrownianPath>,
}

impl PathStack {
    pub fn new(seed: u64, depth: usize) -> Result<Self> {
        Self::with_config(seed, depth, PathConfig::default())
    }

    pub fn with_config(seed: u64, depth: usize, config: PathConfig) -> Result<Self> {
        if depth == 0 {
            return Err(FlowError::EmptyStack);
        }
        let paths = (1..=depth as u64)
            .map(|i| BrownianPath::with_config(derive_seed(seed, i), config))
            .collect();
        Ok(Self { seed, paths })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> usize {
        self.paths.len()
    }

    /// `B_i`, 1-based.
    pub fn path(&self, i: usize) -> Result<&BrownianPath> {
        if i == 0 || i > self.paths.len() {
            return Err(FlowError::IndexOutOfRange {
                index: i,
                depth: self.paths.len(),
            });
        }
        Ok(&self.paths[i - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IteratedValue {
    pub value: f64,
    /// Sum of the per-stage snap error bounds.
    pub snap_error: f64,
}

/// `B_1(B_2(...B_n(t)))`, each stage snapped at `level`.
pub fn iterate_eval(stack: &PathStack, n: usize, t: f64, level: i32) -> Result<IteratedValue> {
    if n == 0 || n > stack.depth() {
        return Err(FlowError::IndexOutOfRange {
            index: n,
            depth: stack.depth(),
        });
    }
    let mut x = t;
    let mut snap_error = 0.0;
    for i in (1..=n).rev() {
        let s = stack.path(i)?.eval(x, level)?;
        x = s.value;
        snap_error += s.error_bound;
    }
    Ok(IteratedValue { value: x, snap_error })
}

/// Image of `j` under `path`: inner from `j`'s inner interval, outer from its
/// outer interval.
pub fn image(path: &BrownianPath, j: &IntervalEnclosure, level: i32) -> Result<IntervalEnclosure> {
    if !j.is_well_formed() {
        return Err(FlowError::MalformedEnclosure);
    }
    let inner = range_enclosure(path, j.inner_lo, j.inner_hi, level)?;
    let outer = range_enclosure(path, j.outer_lo, j.outer_hi, level)?;
    Ok(IntervalEnclosure {
        inner_lo: inner.inner_lo,
        inner_hi: inner.inner_hi,
        outer_lo: outer.outer_lo.min(inner.inner_lo),
        outer_hi: outer.outer_hi.max(inner.inner_hi),
        resolution: outer.resolution,
        inflation: outer.inflation,
    })
}

/// Image of the exact time window `[start, end]`.
pub fn image_window(path: &BrownianPath, start: DyadicTime, end: DyadicTime, level: i32) -> Result<IntervalEnclosure> {
    Ok(range_enclosure_window(path, start, end, level)?)
}

/// `B_i ∘ ... ∘ B_{i+n-1}(j)`; `n = 0` returns `j`.
pub fn compose(stack: &PathStack, i: usize, n: usize, j: &IntervalEnclosure, level: i32) -> Result<IntervalEnclosure> {
    let mut cur = *j;
    for k in (i..i + n).rev() {
        cur = image(stack.path(k)?, &cur, level)?;
    }
    Ok(cur)
}

/// Approximations `A_m = B_i ∘ ... ∘ B_{i+m}(J)` and their convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitInterval {
    pub enclosure: IntervalEnclosure,
    /// Inner endpoints of `A_0, ..., A_{m_max}`.
    pub approximations: Vec<(f64, f64)>,
    /// Hausdorff distance between consecutive inner intervals.
    pub distances: Vec<f64>,
    pub converged: bool,
    /// Larger of the last consecutive distance and the final inflation.
    pub margin: f64,
}

pub fn limit_interval(
    stack: &PathStack,
    i: usize,
    j: (f64, f64),
    m_max: usize,
    tol: f64,
    level: i32,
) -> Result<LimitInterval> {
    let (lo, hi) = j;
    if !(lo <= 0.0 && 0.0 <= hi && lo < hi) {
        return Err(FlowError::BadInterval { lo, hi });
    }
    let j = IntervalEnclosure::exact(lo, hi);
    let mut approximations = Vec::with_capacity(m_max + 1);
    let mut last = j;
    for m in 0..=m_max {
        last = compose(stack, i, m + 1, &j, level)?;
        approximations.push(last.inner());
    }
    let distances: Vec<f64> = approximations.windows(2).map(|w| hausdorff(w[0], w[1])).collect();
    let last_distance = distances.last().copied().unwrap_or(f64::INFINITY);
    Ok(LimitInterval {
        enclosure: last,
        approximations,
        converged: last_distance <= tol,
        margin: if distances.is_empty() {
            last.inflation
        } else {
            last_distance.max(last.inflation)
        },
        distances,
    })
}

/// A finite piece `(x_1, ..., x_n)` of an inverse-limit thread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thread {
    pub coords: Vec<f64>,
    /// `|B_i(x_{i+1}) - x_i|` re-evaluated eight levels finer.
    pub residuals: Vec<f64>,
    /// Snap error bound for each residual.
    pub residual_bounds: Vec<f64>,
    /// Evaluation level of each residual.
    pub levels: Vec<i32>,
}

impl Thread {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn within_bounds(&self) -> bool {
        self.residuals.iter().zip(&self.residual_bounds).all(|(r, b)| r <= b)
    }
}

/// Pulls `x_n` back through the stack: `x_i = B_i(x_{i+1})`.
pub fn thread_sample(stack: &PathStack, n: usize, x_n: f64, level: i32) -> Result<Thread> {
    if n == 0 || n > stack.depth() {
        return Err(FlowError::IndexOutOfRange {
            index: n,
            depth: stack.depth(),
        });
    }
    let mut coords = vec![0.0; n];
    coords[n - 1] = x_n;
    let mut residuals = Vec::with_capacity(n - 1);
    let mut residual_bounds = Vec::with_capacity(n - 1);
    for i in (1..n).rev() {
        let path = stack.path(i)?;
        let s = path.eval(coords[i], level)?;
        coords[i - 1] = s.value;
        let fine = path.eval(coords[i], level + 8)?;
        residuals.push((fine.value - s.value).abs());
        residual_bounds.push(s.error_bound + fine.error_bound);
    }
    residuals.reverse();
    residual_bounds.reverse();
    Ok(Thread {
        coords,
        levels: vec![level; residuals.len()],
        residuals,
        residual_bounds,
    })
}

/// Product metric `sum_i 2^-i min(1, |a_i - b_i|)`.
pub fn thread_distance(a: &Thread, b: &Thread) -> Result<f64> {
    coords_distance(&a.coords, &b.coords)
}

pub fn coords_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FlowError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| (-(i as f64 + 1.0)).exp2() * (x - y).abs().min(1.0))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm_path::SamplePath;
    use proptest::prelude::*;

    #[test]
    fn stack_seeds_are_distinct() {
        let s = PathStack::new(9, 20).unwrap();
        let mut seeds: Vec<u64> = (1..=20).map(|i| s.path(i).unwrap().seed()).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 20);
        assert!(PathStack::new(9, 0).is_err());
        assert!(s.path(0).is_err() && s.path(21).is_err());
    }

    #[test]
    fn zero_is_fixed() {
        let s = PathStack::new(1, 5).unwrap();
        for n in 1..=5 {
            assert_eq!(iterate_eval(&s, n, 0.0, 20).unwrap().value, 0.0);
        }
        let t = thread_sample(&s, 5, 0.0, 20).unwrap();
        assert_eq!(t.coords, vec![0.0; 5]);
    }

    #[test]
    fn single_stage_is_eval() {
        let s = PathStack::new(3, 2).unwrap();
        let v = iterate_eval(&s, 1, 0.7, 20).unwrap();
        assert_eq!(v.value, s.path(1).unwrap().eval(0.7, 20).unwrap().value);
        let t = thread_sample(&s, 1, 0.7, 20).unwrap();
        assert_eq!(t.coords, vec![0.7]);
        assert!(t.residuals.is_empty());
    }

    #[test]
    fn iterated_variance_is_mean_abs() {
        // Var B_1(B_2(1)) = E|B_2(1)| = sqrt(2/pi)
        let n = 10_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for seed in 0..n {
            let s = PathStack::new(seed, 2).unwrap();
            let x = iterate_eval(&s, 2, 1.0, 20).unwrap().value;
            m1 += x;
            m2 += x * x;
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        let target = (2.0 / std::f64::consts::PI).sqrt();
        assert!((var / target - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn image_of_zero_is_zero() {
        let p = BrownianPath::new(5);
        let im = image(&p, &IntervalEnclosure::exact(0.0, 0.0), 10).unwrap();
        assert_eq!((im.inner_lo, im.inner_hi), (0.0, 0.0));
    }

    #[test]
    fn image_is_monotone_in_j() {
        let p = BrownianPath::new(5);
        // widths 1 and 1.5 share the grid spacing 2^-10
        let small = image(&p, &IntervalEnclosure::exact(0.25, 1.25), 10).unwrap();
        let big = image(&p, &IntervalEnclosure::exact(0.0, 1.5), 10).unwrap();
        assert!(big.inner_lo <= small.inner_lo && small.inner_hi <= big.inner_hi);
    }

    #[test]
    fn coarse_outer_contains_fine_inner() {
        for seed in 0..100 {
            let p = BrownianPath::new(seed);
            let j = IntervalEnclosure::exact(0.0, 1.0);
            let coarse = image(&p, &j, 10).unwrap();
            let fine = image(&p, &j, 16).unwrap();
            assert!(coarse.outer_lo <= fine.inner_lo && fine.inner_hi <= coarse.outer_hi);
        }
    }

    #[test]
    fn limit_base_case_is_image() {
        let s = PathStack::new(2, 4).unwrap();
        let l = limit_interval(&s, 1, (0.0, 1.0), 0, 0.1, 10).unwrap();
        let im = image(s.path(1).unwrap(), &IntervalEnclosure::exact(0.0, 1.0), 10).unwrap();
        assert_eq!(l.enclosure, im);
        assert!(l.distances.is_empty());
        assert!(limit_interval(&s, 1, (0.1, 1.0), 0, 0.1, 10).is_err());
    }

    #[test]
    fn limit_approximations_contain_zero() {
        for seed in 0..10 {
            let s = PathStack::new(seed, 8).unwrap();
            let l = limit_interval(&s, 1, (-1.0, 0.5), 6, 0.01, 10).unwrap();
            for (lo, hi) in &l.approximations {
                assert!(*lo <= 0.0 && 0.0 <= *hi);
            }
            assert_eq!(l.distances.len(), 6);
        }
    }

    #[test]
    fn thread_residuals_within_snap_bound() {
        let s = PathStack::new(11, 4).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..100 {
            let x = -2.0 + 4.0 * k as f64 / 99.0;
            let t = thread_sample(&s, 4, x, 24).unwrap();
            assert!(t.within_bounds(), "{t:?}");
            worst = worst.max(t.residuals.iter().cloned().fold(0.0, f64::max));
        }
        assert!(worst < 1e-2);
    }

    #[test]
    fn thread_equation_holds_on_the_grid() {
        let s = PathStack::new(12, 3).unwrap();
        let t = thread_sample(&s, 3, 0.3, 20).unwrap();
        for i in 1..3 {
            assert_eq!(s.path(i).unwrap().eval(t.coords[i], 20).unwrap().value, t.coords[i - 1]);
        }
        assert!(s.path(1).unwrap().max_level() >= 20);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(coords_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(coords_distance(&[0.5, 2.0], &[0.0, 2.0]).unwrap(), 0.25);
        assert_eq!(coords_distance(&[10.0], &[0.0]).unwrap(), 0.5);
        assert!(coords_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            b in prop::collection::vec(-3.0f64..3.0, 6),
            c in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let ab = coords_distance(&a, &b).unwrap();
            let ba = coords_distance(&b, &a).unwrap();
            let bc = coords_distance(&b, &c).unwrap();
            let ac = coords_distance(&a, &c).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab >= 0.0);
        }
    }
}
