//! Excursions between two levels and the good-shape (pentomino) test.
//!
//! An excursion from `u` to `v` runs from the last grid time at or below `u`
//! to the first grid time at or above `v` after it. Its window is cut into a
//! 3×3 grid (time thirds × value thirds); the excursion has a good shape when
//! every sample stays in the occupied cells.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm_path::{
    first_hit_dyadic, first_hit_within, ldexp, level_for_spacing, scale_level, BrownianPath, Direction,
    DyadicTime, Limit, PathError, SamplePath,
};
use crate::rng::derive_seed;
use crate::stats::{
    excursion_budget, hitting_cdf, ks_critical_95, ks_one_sample, KsReport, McEstimate, StatsError, HITTING_HORIZON,
};

/// Hitting searches run this many levels finer than shape sampling.
pub const HIT_LEVEL_OFFSET: i32 = 10;

/// Time budget (in units of `(v - u)^2`) for simulating a single excursion.
pub const SINGLE_EXCURSION_HORIZON: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExcursionError {
    #[error("levels must satisfy 0 <= u < v, got u = {u:e}, v = {v:e}")]
    InvalidLevels { u: f64, v: f64 },
    #[error("[{u:e}, {v:e}] is not inside [0, {a:e}]")]
    OutsideScale { u: f64, v: f64, a: f64 },
    #[error("shape is malformed: {0}")]
    BadShape(&'static str),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Path(#[from] PathError),
}

pub type Result<T, E = ExcursionError> = std::result::Result<T, E>;

/// Occupied cells of the 3×3 window grid, indexed `[time third][value third]`
/// with value third 0 at the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub occupancy: [[bool; 3]; 3],
}

impl Default for ShapeParams {
    /// S-pentomino: bottom+middle, then middle, then middle+top.
    fn default() -> Self {
        Self {
            occupancy: [[true, true, false], [false, true, false], [false, true, true]],
        }
    }
}

impl ShapeParams {
    /// Every cell occupied: any excursion passes.
    pub fn full() -> Self {
        Self {
            occupancy: [[true; 3]; 3],
        }
    }

    pub fn occupied_cells(&self) -> usize {
        self.occupancy.iter().flatten().filter(|&&c| c).count()
    }

    /// Entry cell (first third, bottom) and exit cell (last third, top) must
    /// be occupied.
    pub fn validate(&self) -> Result<()> {
        if !self.occupancy[0][0] {
            return Err(ExcursionError::BadShape("entry cell (time 1, bottom) is empty"));
        }
        if !self.occupancy[2][2] {
            return Err(ExcursionError::BadShape("exit cell (time 3, top) is empty"));
        }
        Ok(())
    }

    /// Distance from `x` to the allowed values of column `col`, in units of
    /// the band width `v - u`. Bottom and top bands are unbounded outward.
    fn column_distance(&self, col: usize, x: f64, u: f64, v: f64) -> f64 {
        let h = (v - u) / 3.0;
        let mut best = f64::INFINITY;
        for row in 0..3 {
            if !self.occupancy[col][row] {
                continue;
            }
            let lo = if row == 0 { f64::NEG_INFINITY } else { u + row as f64 * h };
            let hi = if row == 2 { f64::INFINITY } else { u + (row + 1) as f64 * h };
            let d = if x < lo {
                lo - x
            } else if x > hi {
                x - hi
            } else {
                0.0
            };
            best = best.min(d);
        }
        best / (v - u)
    }

    /// Violation of a sample at time fraction `f` in `[0, 1]`. Boundary
    /// times belong to both adjacent columns.
    pub fn sample_violation(&self, f: f64, x: f64, u: f64, v: f64) -> f64 {
        let mut best = f64::INFINITY;
        for col in 0..3 {
            let (lo, hi) = (col as f64 / 3.0, (col + 1) as f64 / 3.0);
            if f >= lo && f <= hi {
                best = best.min(self.column_distance(col, x, u, v));
            }
        }
        if best.is_infinite() {
            // outside the window: nothing to check
            0.0
        } else {
            best
        }
    }
}

/// One excursion from `u` to `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Excursion {
    pub start: DyadicTime,
    pub end: DyadicTime,
    pub u: f64,
    pub v: f64,
    /// 1-based position in the sequence of excursions.
    pub index: usize,
}

impl Excursion {
    pub fn start_time(&self) -> f64 {
        self.start.to_f64()
    }

    pub fn end_time(&self) -> f64 {
        self.end.to_f64()
    }

    pub fn window(&self) -> (f64, f64) {
        (self.start_time(), self.end_time())
    }

    pub fn duration(&self) -> f64 {
        self.end.since(self.start)
    }
}

/// Lazily enumerates successive excursions from `u` to `v`.
pub struct ExcursionIter<'a, P: ?Sized> {
    path: &'a P,
    u: f64,
    v: f64,
    t_max: f64,
    cursor: Option<DyadicTime>,
    next_index: usize,
}

impl<'a, P: SamplePath + ?Sized> ExcursionIter<'a, P> {
    /// `level` is relative to the band's natural time scale `(v - u)^2`.
    pub fn new(path: &'a P, u: f64, v: f64, t_max: f64, level: i32) -> Result<Self> {
        if !(u >= 0.0 && u < v && v.is_finite()) {
            return Err(ExcursionError::InvalidLevels { u, v });
        }
        let hit_level = scale_level(v - u, level);
        if hit_level > path.max_level() {
            return Err(PathError::ResolutionExceeded {
                level: hit_level,
                cap: path.max_level(),
            }
            .into());
        }
        Ok(Self {
            path,
            u,
            v,
            t_max,
            cursor: Some(DyadicTime::new(hit_level, 0)),
            next_index: 1,
        })
    }

    fn advance(&mut self) -> Result<Option<Excursion>> {
        let Some(cur) = self.cursor.take() else {
            return Ok(None);
        };
        let Some(end) = first_hit_dyadic(self.path, self.v, cur, Direction::Forward, self.t_max)? else {
            return Ok(None);
        };
        let start = first_hit_within(self.path, self.u, end, Direction::Backward, Limit::Exact(cur))?
            .unwrap_or(cur);
        self.cursor = first_hit_dyadic(self.path, self.u, end, Direction::Forward, self.t_max)?;
        let e = Excursion {
            start,
            end,
            u: self.u,
            v: self.v,
            index: self.next_index,
        };
        self.next_index += 1;
        Ok(Some(e))
    }
}

impl<'a, P: SamplePath + ?Sized> Iterator for ExcursionIter<'a, P> {
    type Item = Result<Excursion>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.advance() {
            Ok(Some(e)) => Some(Ok(e)),
            Ok(None) => None,
            Err(err) => {
                self.cursor = None;
                Some(Err(err))
            }
        }
    }
}

/// All excursions from `u` to `v` that reach `v` by `t_max`, in order.
pub fn decompose_excursions<P: SamplePath + ?Sized>(
    path: &P,
    u: f64,
    v: f64,
    t_max: f64,
    level: i32,
) -> Result<Vec<Excursion>> {
    ExcursionIter::new(path, u, v, t_max, level)?.collect()
}

/// Outcome of the shape test on one excursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeVerdict {
    pub good: bool,
    /// Largest distance of a sample outside the allowed region, in units of
    /// `v - u`; zero for a good shape.
    pub violation: f64,
    pub samples: usize,
}

/// Grid level used to sample an excursion of duration `duration`.
pub fn shape_grid_level(duration: f64, level: i32) -> i32 {
    level_for_spacing(ldexp(duration, -level))
}

/// Visits `(fraction of the window, value)` at spacing `duration * 2^-level`
/// plus both endpoints, in time order.
pub fn visit_excursion<P: SamplePath + ?Sized>(
    path: &P,
    e: &Excursion,
    level: i32,
    f: &mut dyn FnMut(f64, f64),
) -> Result<()> {
    let duration = e.duration();
    f(0.0, path.value_at(e.start)?);
    if duration > 0.0 {
        let grid = shape_grid_level(duration, level).min(path.max_level());
        // fractions are taken on the finest of the three grids, exactly
        let fine = grid.max(e.start.level).max(e.end.level);
        let s0 = e.start.floor_at(fine);
        let span = (e.end.floor_at(fine) - s0) as f64;
        let shift = fine - grid;
        let first = e.start.floor_at(grid) + 1;
        let last = e.end.ceil_at(grid) - 1;
        path.visit_grid(grid, first, last, &mut |o, x| f(((o << shift) - s0) as f64 / span, x))?;
    }
    f(1.0, path.value_at(e.end)?);
    Ok(())
}

/// Samples the excursion window at spacing `duration * 2^-level` (plus its
/// endpoints) and checks every sample against `shape`.
pub fn shape_check<P: SamplePath + ?Sized>(
    path: &P,
    e: &Excursion,
    shape: &ShapeParams,
    level: i32,
) -> Result<ShapeVerdict> {
    let mut violation: f64 = 0.0;
    let mut samples = 0usize;
    visit_excursion(path, e, level, &mut |f, x| {
        violation = violation.max(shape.sample_violation(f, x, e.u, e.v));
        samples += 1;
    })?;
    Ok(ShapeVerdict {
        good: violation == 0.0,
        violation,
        samples,
    })
}

pub fn good_shape<P: SamplePath + ?Sized>(
    path: &P,
    e: &Excursion,
    shape: &ShapeParams,
    level: i32,
) -> Result<bool> {
    Ok(shape_check(path, e, shape, level)?.good)
}

/// Bookkeeping of one good-shape search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub u: f64,
    pub v: f64,
    pub a: f64,
    /// `a^(5/4)`: excursions must finish by then.
    pub time_limit: f64,
    /// `floor(a^(-1/4))`.
    pub budget: u64,
    pub inspected: usize,
    pub verdicts: Vec<ShapeVerdict>,
    /// Ran out of excursions finishing before `time_limit`.
    pub exhausted: bool,
}

/// Searches the first `floor(a^(-1/4))` excursions from `u` to `v` finishing
/// before `a^(5/4)` for one with a good shape.
pub fn find_good_excursion<P: SamplePath + ?Sized>(
    path: &P,
    u: f64,
    v: f64,
    a: f64,
    shape: &ShapeParams,
    level: i32,
) -> Result<(Option<Excursion>, SearchReport)> {
    if !(u >= 0.0 && u < v) {
        return Err(ExcursionError::InvalidLevels { u, v });
    }
    if v > a {
        return Err(ExcursionError::OutsideScale { u, v, a });
    }
    shape.validate()?;
    let budget = excursion_budget(a);
    if budget == 0 {
        return Err(StatsError::NoExcursionBudget { a }.into());
    }
    let time_limit = a.powf(1.25);
    let mut report = SearchReport {
        u,
        v,
        a,
        time_limit,
        budget,
        inspected: 0,
        verdicts: Vec::new(),
        exhausted: false,
    };
    let mut iter = ExcursionIter::new(path, u, v, time_limit, level + HIT_LEVEL_OFFSET)?;
    while (report.inspected as u64) < budget {
        let Some(e) = iter.next().transpose()? else {
            report.exhausted = true;
            break;
        };
        let verdict = shape_check(path, &e, shape, level)?;
        report.inspected += 1;
        report.verdicts.push(verdict);
        if verdict.good {
            return Ok((Some(e), report));
        }
    }
    Ok((None, report))
}

/// First excursion from `u` to `v` of a fresh path, with its shape verdict.
pub fn first_excursion_shape(
    seed: u64,
    u: f64,
    v: f64,
    shape: &ShapeParams,
    level: i32,
) -> Result<Option<ShapeVerdict>> {
    let path = BrownianPath::new(seed);
    let t_max = SINGLE_EXCURSION_HORIZON * (v - u) * (v - u);
    let mut iter = ExcursionIter::new(&path, u, v, t_max, level + HIT_LEVEL_OFFSET)?;
    match iter.next().transpose()? {
        Some(e) => Ok(Some(shape_check(&path, &e, shape, level)?)),
        None => Ok(None),
    }
}

/// Fraction of first excursions with a good shape, over `trials` fresh paths.
///
/// Paths whose first excursion does not finish within
/// [`SINGLE_EXCURSION_HORIZON`] are left out of the count.
pub fn estimate_r(
    seed: u64,
    trials: usize,
    u: f64,
    v: f64,
    shape: &ShapeParams,
    level: i32,
) -> Result<McEstimate> {
    if trials == 0 {
        return Err(StatsError::NoTrials.into());
    }
    shape.validate()?;
    let verdicts: Vec<Option<ShapeVerdict>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| first_excursion_shape(derive_seed(seed, i), u, v, shape, level))
        .collect::<Result<_>>()?;
    let done: Vec<&ShapeVerdict> = verdicts.iter().flatten().collect();
    let good = done.iter().filter(|v| v.good).count() as u64;
    Ok(McEstimate::from_counts(good, done.len() as u64)?)
}

/// KS fit of the `k`-th completion time against `T_{u + (2k-1)(v-u)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub k: usize,
    /// `u + (2k - 1)(v - u)`.
    pub target: f64,
    pub ks: KsReport,
}

/// Completion times of the first `k_max` excursions from `u` to `v` on
/// `trials` fresh paths, each compared with the hitting law of
/// `u + (2k - 1)(v - u)`. Excursions not finished by [`HITTING_HORIZON`] are
/// censored.
pub fn completion_ks(
    seed: u64,
    trials: usize,
    u: f64,
    v: f64,
    k_max: usize,
    level: i32,
) -> Result<Vec<CompletionReport>> {
    if trials == 0 {
        return Err(StatsError::NoTrials.into());
    }
    let ends: Vec<Vec<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let path = BrownianPath::new(derive_seed(seed, i));
            ExcursionIter::new(&path, u, v, HITTING_HORIZON, level + HIT_LEVEL_OFFSET)?
                .take(k_max)
                .map(|e| e.map(|e| e.end_time()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((1..=k_max)
        .map(|k| {
            let target = u + (2 * k - 1) as f64 * (v - u);
            let times: Vec<f64> = ends.iter().filter_map(|e| e.get(k - 1).copied()).collect();
            CompletionReport {
                k,
                target,
                ks: KsReport {
                    statistic: ks_one_sample(&times, trials, HITTING_HORIZON, |t| hitting_cdf(target, t)),
                    trials,
                    completed: times.len(),
                    critical_95: ks_critical_95(trials),
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm_path::{range_enclosure, LinearPath};
    use proptest::prelude::*;

    const LEVEL: i32 = 8;

    fn excursion(path: &LinearPath, s: f64, t: f64, u: f64, v: f64) -> (LinearPath, Excursion) {
        let level = 20;
        (
            path.clone(),
            Excursion {
                start: DyadicTime::snap(s, level).unwrap(),
                end: DyadicTime::snap(t, level).unwrap(),
                u,
                v,
                index: 1,
            },
        )
    }

    /// Rises u -> mid in the first third, flat, rises to v in the last third.
    fn s_shaped() -> LinearPath {
        LinearPath::new(vec![(0.0, 1.0), (1.0, 1.5), (2.0, 1.5), (3.0, 2.0)])
    }

    #[test]
    fn default_shape_is_a_pentomino() {
        let s = ShapeParams::default();
        assert_eq!(s.occupied_cells(), 5);
        assert!(s.validate().is_ok());
        let mut bad = s;
        bad.occupancy[2][2] = false;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn s_shaped_fixture_is_good() {
        let (p, e) = excursion(&s_shaped(), 0.0, 3.0, 1.0, 2.0);
        assert!(good_shape(&p, &e, &ShapeParams::default(), LEVEL).unwrap());
    }

    #[test]
    fn early_top_third_is_bad() {
        let f = LinearPath::new(vec![(0.0, 1.0), (0.5, 1.8), (1.0, 1.5), (2.0, 1.5), (3.0, 2.0)]);
        let (p, e) = excursion(&f, 0.0, 3.0, 1.0, 2.0);
        let v = shape_check(&p, &e, &ShapeParams::default(), LEVEL).unwrap();
        assert!(!v.good);
        assert!((v.violation - (1.8 - 5.0 / 3.0)).abs() < 0.01);
    }

    #[test]
    fn return_to_bottom_in_middle_third_is_bad() {
        let f = LinearPath::new(vec![(0.0, 1.0), (1.0, 1.5), (1.5, 1.0), (2.0, 1.5), (3.0, 2.0)]);
        let (p, e) = excursion(&f, 0.0, 3.0, 1.0, 2.0);
        assert!(!good_shape(&p, &e, &ShapeParams::default(), LEVEL).unwrap());
    }

    #[test]
    fn full_shape_accepts_everything() {
        let f = LinearPath::new(vec![(0.0, 1.0), (0.5, 1.9), (1.5, 1.01), (3.0, 2.0)]);
        let (p, e) = excursion(&f, 0.0, 3.0, 1.0, 2.0);
        assert!(good_shape(&p, &e, &ShapeParams::full(), LEVEL).unwrap());
    }

    #[test]
    fn path_below_u_has_no_excursions() {
        let f = LinearPath::new(vec![(0.0, 0.0), (1.0, 0.05), (2.0, -0.3), (4.0, 0.09)]);
        let ex = decompose_excursions(&f, 0.1, 0.2, 4.0, 4).unwrap();
        assert!(ex.is_empty());
    }

    #[test]
    fn sawtooth_has_two_excursions() {
        // 0 -> 0.3 -> 0 -> 0.3, crossing u = 0.1 and v = 0.2 twice
        let f = LinearPath::new(vec![(0.0, 0.0), (1.0, 0.3), (2.0, 0.0), (3.0, 0.3)]);
        let ex = decompose_excursions(&f, 0.1, 0.2, 3.0, 6).unwrap();
        assert_eq!(ex.len(), 2);
        // level 6 relative to (0.1)^2 -> grid 2^-13 in absolute time
        let tol = 2f64.powi(-12);
        let expected = [(1.0 / 3.0, 2.0 / 3.0), (2.0 + 1.0 / 3.0, 2.0 + 2.0 / 3.0)];
        for (e, (s, t)) in ex.iter().zip(expected) {
            assert!((e.start_time() - s).abs() < tol, "{:?}", e.window());
            assert!((e.end_time() - t).abs() < tol, "{:?}", e.window());
        }
        assert_eq!((ex[0].index, ex[1].index), (1, 2));
    }

    #[test]
    fn excursions_respect_their_levels() {
        for seed in 0..10 {
            let p = BrownianPath::new(seed);
            let ex = decompose_excursions(&p, 0.1, 0.2, 5.0, 10).unwrap();
            let mut last_end = 0.0;
            for e in &ex {
                assert!(e.start_time() >= last_end);
                assert!(e.start_time() < e.end_time());
                assert!(p.value_at(e.start).unwrap() <= 0.1);
                assert!(p.value_at(e.end).unwrap() >= 0.2);
                let level = e.end.level;
                p.visit_grid(level, e.start.offset + 1, e.end.offset - 1, &mut |_, x| {
                    assert!(x > 0.1 && x < 0.2)
                })
                .unwrap();
                last_end = e.end_time();
            }
        }
    }

    #[test]
    fn single_excursion_budget_is_respected() {
        // floor(a^(-1/4)) = 1 for a in (1/16, 1]
        let p = BrownianPath::new(3);
        let (_, report) = find_good_excursion(&p, 0.1, 0.2, 0.5, &ShapeParams::default(), 8).unwrap();
        assert_eq!(report.budget, 1);
        assert!(report.inspected <= 1);
    }

    #[test]
    fn found_window_is_inside_time_limit() {
        let mut found = 0;
        for seed in 0..30 {
            let p = BrownianPath::new(seed);
            let a = 1e-4;
            let (w, report) = find_good_excursion(&p, a / 3.0, 2.0 * a / 3.0, a, &ShapeParams::default(), 8).unwrap();
            if let Some(e) = w {
                found += 1;
                assert!(e.start_time() >= 0.0 && e.end_time() <= a.powf(1.25));
                assert!(report.verdicts.last().unwrap().good);
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn search_rejects_bad_inputs() {
        let p = BrownianPath::new(0);
        let s = ShapeParams::default();
        assert!(find_good_excursion(&p, 0.2, 0.1, 1.0, &s, 8).is_err());
        assert!(find_good_excursion(&p, 0.1, 0.2, 0.15, &s, 8).is_err());
        assert!(find_good_excursion(&p, 0.1, 0.2, 20.0, &s, 8).is_err());
        assert!(estimate_r(0, 0, 0.1, 0.2, &s, 8).is_err());
    }

    #[test]
    fn good_excursions_map_thirds_into_bands() {
        // sampled images of the first/last two time-thirds sit in the
        // lower/upper two value-thirds
        let shape = ShapeParams::default();
        let mut checked = 0;
        for seed in 0..1000 {
            let p = BrownianPath::new(seed);
            let (u, v) = (0.1, 0.2);
            let Some(e) = ExcursionIter::new(&p, u, v, 1e6, 20).unwrap().next() else {
                continue;
            };
            let e = e.unwrap();
            if !good_shape(&p, &e, &shape, 10).unwrap() {
                continue;
            }
            let (s, t) = e.window();
            let h = (v - u) / 3.0;
            let tol = 0.02 * (v - u);
            let lower = range_enclosure(&p, s, s + 2.0 * (t - s) / 3.0, 10).unwrap();
            let upper = range_enclosure(&p, s + (t - s) / 3.0, t, 10).unwrap();
            assert!(lower.inner_lo >= u - tol && lower.inner_hi <= u + 2.0 * h + tol);
            assert!(upper.inner_lo >= u + h - tol && upper.inner_hi <= v + tol);
            checked += 1;
        }
        assert!(checked > 3, "{checked}");
    }

    proptest! {
        #[test]
        fn shape_verdict_is_scale_invariant(k in -20i32..20, mid in 1.05f64..1.95, wiggle in 0.0f64..0.5) {
            // excursion u=1 -> v=2 over [0, 3] with a wiggle in the middle third
            let f = LinearPath::new(vec![
                (0.0, 1.0), (1.0, mid), (1.5, mid + wiggle * (1.9 - mid)), (2.0, mid), (3.0, 2.0),
            ]);
            let (p, e) = excursion(&f, 0.0, 3.0, 1.0, 2.0);
            let base = good_shape(&p, &e, &ShapeParams::default(), LEVEL).unwrap();
            let c = 2f64.powi(k);
            let g = f.rescaled(c);
            let scaled = Excursion {
                start: DyadicTime::snap(0.0, 20 - 2 * k).unwrap(),
                end: DyadicTime::snap(3.0 * c * c, 20 - 2 * k).unwrap(),
                u: c,
                v: 2.0 * c,
                index: 1,
            };
            prop_assert_eq!(base, good_shape(&g, &scaled, &ShapeParams::default(), LEVEL).unwrap());
        }
    }
}
