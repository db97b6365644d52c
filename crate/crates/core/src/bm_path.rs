//! Lazily refined, seed-deterministic two-sided Brownian paths.
//!
//! A path is built by Lévy's midpoint construction on the dyadic grid. The
//! value at a dyadic time `offset * 2^-level` depends only on the seed and on
//! that address: the Gaussian driving each midpoint comes from a counter-based
//! generator keyed by `(seed, side, level)` with the odd offset as counter. Any
//! query order therefore materializes the same path.
//!
//! Each side covers `[0, 2^32]` in its own time direction; the top value
//! `B(±2^32)` is drawn first and everything else is refined from it.

use std::collections::hash_map::Entry;
use std::sync::Mutex;

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::rng::{splitmix64, NormalStream};

/// Coarsest dyadic level: each side spans `[0, 2^32]`.
pub const TOP_LEVEL: i32 = -32;
/// Default hard cap on refinement levels (`2^-1000 ≈ 9.3e-302`).
pub const DEFAULT_MAX_LEVEL: i32 = 1000;
/// Largest dyadic offset the generator will address.
pub const MAX_OFFSET: u128 = 1 << 125;
/// Default constant in the modulus inflation `C * sqrt(δ ln(e + w/δ))`.
pub const DEFAULT_MODULUS_CONSTANT: f64 = 2.0;
/// Default pruning threshold for adaptive hitting-time searches.
pub const DEFAULT_PRUNE_PROBABILITY: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("dyadic level {level} exceeds the resolution cap {cap}")]
    ResolutionExceeded { level: i32, cap: i32 },
    #[error("time {time:e} is outside the supported horizon of ±2^32")]
    HorizonExceeded { time: f64 },
    #[error("invalid interval [{lo:e}, {hi:e}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("non-finite time or value")]
    NonFinite,
}

pub type Result<T, E = PathError> = std::result::Result<T, E>;

/// `x * 2^exp` without intermediate overflow or underflow of the power.
pub fn ldexp(x: f64, exp: i32) -> f64 {
    let mut x = x;
    let mut e = exp;
    while e > 500 {
        x *= 2f64.powi(500);
        e -= 500;
    }
    while e < -500 {
        x *= 2f64.powi(-500);
        e += 500;
    }
    x * 2f64.powi(e)
}

/// Smallest level `A` with `2^-A <= spacing`.
pub fn level_for_spacing(spacing: f64) -> i32 {
    debug_assert!(spacing > 0.0);
    let mut a = (-spacing.log2()).ceil() as i32;
    while ldexp(1.0, -a) > spacing {
        a += 1;
    }
    while ldexp(1.0, -(a - 1)) <= spacing {
        a -= 1;
    }
    a
}

/// Level at which the grid spacing is `2^-relative` times the natural time
/// scale of a value band of width `width` (Brownian time scale `width^2`).
pub fn scale_level(width: f64, relative: i32) -> i32 {
    level_for_spacing(width * width) + relative
}

/// A signed dyadic time `offset * 2^-level`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DyadicTime {
    pub level: i32,
    pub offset: i128,
}

impl DyadicTime {
    pub const ZERO: DyadicTime = DyadicTime { level: 0, offset: 0 };

    pub fn new(level: i32, offset: i128) -> Self {
        Self { level, offset }
    }

    /// Nearest grid point to `t` at `level`.
    pub fn snap(t: f64, level: i32) -> Result<Self> {
        if !t.is_finite() {
            return Err(PathError::NonFinite);
        }
        let scaled = ldexp(t, level).round();
        if scaled.abs() >= MAX_OFFSET as f64 {
            return Err(PathError::ResolutionExceeded {
                level,
                cap: level - 1,
            });
        }
        Ok(Self {
            level,
            offset: scaled as i128,
        })
    }

    pub fn to_f64(self) -> f64 {
        ldexp(self.offset as f64, -self.level)
    }

    /// Same time expressed at a finer level.
    pub fn refine(self, level: i32) -> Result<Self> {
        assert!(level >= self.level);
        let shift = (level - self.level) as u32;
        let offset = if self.offset == 0 {
            0
        } else {
            if shift >= 127 || self.offset.unsigned_abs() >= (MAX_OFFSET >> shift) {
                return Err(PathError::ResolutionExceeded {
                    level,
                    cap: level - 1,
                });
            }
            self.offset << shift
        };
        Ok(Self { level, offset })
    }

    /// Offset of the last grid point at `level` not after `self`.
    pub fn floor_at(self, level: i32) -> i128 {
        if level >= self.level {
            self.offset << (level - self.level)
        } else {
            self.offset >> (self.level - level).min(127)
        }
    }

    /// Offset of the first grid point at `level` not before `self`.
    pub fn ceil_at(self, level: i32) -> i128 {
        if level >= self.level {
            return self.offset << (level - self.level);
        }
        let shift = (self.level - level).min(127);
        let q = self.offset >> shift;
        if q << shift == self.offset {
            q
        } else {
            q + 1
        }
    }

    /// `self - earlier`, exact up to the final rounding when both fit on a
    /// common grid.
    pub fn since(self, earlier: DyadicTime) -> f64 {
        let level = self.level.max(earlier.level);
        match (self.refine(level), earlier.refine(level)) {
            (Ok(a), Ok(b)) => ldexp((a.offset - b.offset) as f64, -level),
            _ => self.to_f64() - earlier.to_f64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Positive,
    Negative,
}

/// Search direction along the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Inner/outer bracketing of a real interval.
///
/// `inner` is what finite sampling saw; `outer` adds a modulus-of-continuity
/// margin. The outer bracket is a probabilistic statement, not a certificate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntervalEnclosure {
    pub inner_lo: f64,
    pub inner_hi: f64,
    pub outer_lo: f64,
    pub outer_hi: f64,
    /// Grid spacing used for the samples; `f64::INFINITY` for exact inputs.
    pub resolution: f64,
    /// Margin added on each side by the last sampling stage.
    pub inflation: f64,
}

impl IntervalEnclosure {
    /// An interval known exactly.
    pub fn exact(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "exact enclosure needs lo <= hi");
        Self {
            inner_lo: lo,
            inner_hi: hi,
            outer_lo: lo,
            outer_hi: hi,
            resolution: f64::INFINITY,
            inflation: 0.0,
        }
    }

    pub fn inner(&self) -> (f64, f64) {
        (self.inner_lo, self.inner_hi)
    }

    pub fn outer(&self) -> (f64, f64) {
        (self.outer_lo, self.outer_hi)
    }

    pub fn inner_width(&self) -> f64 {
        self.inner_hi - self.inner_lo
    }

    pub fn outer_width(&self) -> f64 {
        self.outer_hi - self.outer_lo
    }

    pub fn is_well_formed(&self) -> bool {
        self.outer_lo <= self.inner_lo
            && self.inner_lo <= self.inner_hi
            && self.inner_hi <= self.outer_hi
            && self.resolution > 0.0
    }
}

/// Hausdorff distance between two closed intervals.
pub fn hausdorff(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

/// Modulus-of-continuity inflation for samples at spacing `delta` over a
/// window of length `window`.
pub fn modulus_inflation(constant: f64, delta: f64, window: f64) -> f64 {
    if delta <= 0.0 || window <= 0.0 {
        return 0.0;
    }
    constant * (delta * (std::f64::consts::E + window / delta).ln()).sqrt()
}

/// Anything that can be sampled on the dyadic grid.
pub trait SamplePath {
    fn value_at(&self, t: DyadicTime) -> Result<f64>;

    /// Calls `f(offset, value)` for every grid offset in `first..=last` at
    /// `level`, in increasing time order.
    fn visit_grid(
        &self,
        level: i32,
        first: i128,
        last: i128,
        f: &mut dyn FnMut(i128, f64),
    ) -> Result<()> {
        for off in first..=last {
            f(off, self.value_at(DyadicTime::new(level, off))?);
        }
        Ok(())
    }

    /// Whether the path may reach `target` strictly inside a cell of length
    /// `dt` whose endpoint values `a`, `b` are both on the same side of it.
    fn may_cross(&self, _dt: f64, _a: f64, _b: f64, _target: f64) -> bool {
        true
    }

    fn max_level(&self) -> i32 {
        DEFAULT_MAX_LEVEL
    }

    fn modulus_constant(&self) -> f64 {
        DEFAULT_MODULUS_CONSTANT
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    pub max_level: i32,
    pub modulus_constant: f64,
    /// Cells whose Brownian-bridge crossing probability is below this are
    /// skipped by hitting-time searches.
    pub prune_probability: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            max_level: DEFAULT_MAX_LEVEL,
            modulus_constant: DEFAULT_MODULUS_CONSTANT,
            prune_probability: DEFAULT_PRUNE_PROBABILITY,
        }
    }
}

/// A value returned by [`BrownianPath::eval`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub time: DyadicTime,
    pub snap_distance: f64,
    /// Modulus bound on `|B(t) - B(snapped t)|`.
    pub error_bound: f64,
}

type CacheKey = (bool, i32, u128);

/// Two-sided standard Brownian motion, refined on demand.
#[derive(Debug)]
pub struct BrownianPath {
    seed: u64,
    config: PathConfig,
    cache: Mutex<FxHashMap<CacheKey, f64>>,
    /// Deepest level materialized so far.
    max_level_hint: Mutex<i32>,
}

impl Clone for BrownianPath {
    fn clone(&self) -> Self {
        Self {
            seed: self.seed,
            config: self.config,
            cache: Mutex::new(self.cache.lock().unwrap().clone()),
            max_level_hint: Mutex::new(*self.max_level_hint.lock().unwrap()),
        }
    }
}

#[inline]
fn normalize(level: i32, offset: u128) -> (i32, u128) {
    if offset == 0 {
        return (level, 0);
    }
    let tz = offset.trailing_zeros();
    (level - tz as i32, offset >> tz)
}

/// Conditional standard deviation of a midpoint introduced at `level`.
#[inline]
fn midpoint_sd(level: i32) -> f64 {
    (-(f64::from(level) + 1.0) * 0.5).exp2()
}

impl BrownianPath {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, PathConfig::default())
    }

    pub fn with_config(seed: u64, config: PathConfig) -> Self {
        Self {
            seed,
            config,
            cache: Mutex::new(FxHashMap::default()),
            max_level_hint: Mutex::new(TOP_LEVEL),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &PathConfig {
        &self.config
    }

    pub fn max_level_hint(&self) -> i32 {
        *self.max_level_hint.lock().unwrap()
    }

    /// Number of memoized grid values.
    pub fn cached_samples(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    fn stream(&self, side: Side, level: i32) -> NormalStream {
        let tag = ((matches!(side, Side::Negative) as u64) << 32) | u64::from((level + 64) as u32);
        NormalStream::new(splitmix64(self.seed ^ splitmix64(tag ^ 0x5851_F42D_4C95_7F2D)))
    }

    #[inline]
    fn gaussian(&self, side: Side, level: i32, offset: u128) -> f64 {
        self.stream(side, level).normal(offset)
    }

    /// Value at side-local dyadic address `offset * 2^-level`.
    pub fn value_side(&self, side: Side, level: i32, offset: u128) -> Result<f64> {
        if offset == 0 {
            return Ok(0.0);
        }
        let (level, offset) = normalize(level, offset);
        if level < TOP_LEVEL || (level == TOP_LEVEL && offset > 1) {
            return Err(PathError::HorizonExceeded {
                time: ldexp(offset as f64, -level),
            });
        }
        if level > self.config.max_level {
            return Err(PathError::ResolutionExceeded {
                level,
                cap: self.config.max_level,
            });
        }
        if offset >= MAX_OFFSET {
            return Err(PathError::ResolutionExceeded {
                level,
                cap: level - 1,
            });
        }
        if level == TOP_LEVEL {
            return Ok(midpoint_sd(TOP_LEVEL - 1) * self.gaussian(side, TOP_LEVEL, 1));
        }
        let key = (matches!(side, Side::Negative), level, offset);
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let left = self.value_side(side, level - 1, offset >> 1)?;
        let right = self.value_side(side, level - 1, (offset >> 1) + 1)?;
        let value = 0.5 * (left + right) + midpoint_sd(level) * self.gaussian(side, level, offset);
        {
            let mut cache = self.cache.lock().unwrap();
            if let Entry::Vacant(e) = cache.entry(key) {
                e.insert(value);
            }
        }
        let mut hint = self.max_level_hint.lock().unwrap();
        if level > *hint {
            *hint = level;
        }
        Ok(value)
    }

    /// Value at the grid point nearest to `t` at `level`.
    pub fn eval(&self, t: f64, level: i32) -> Result<Sample> {
        if level > self.config.max_level {
            return Err(PathError::ResolutionExceeded {
                level,
                cap: self.config.max_level,
            });
        }
        let time = DyadicTime::snap(t, level)?;
        let value = self.value_at(time)?;
        let snap_distance = (t - time.to_f64()).abs();
        Ok(Sample {
            value,
            time,
            snap_distance,
            error_bound: modulus_inflation(self.config.modulus_constant, snap_distance, 1.0),
        })
    }

    /// Interior midpoints of an aligned block, emitted in increasing order.
    fn fill_block(
        &self,
        side: Side,
        level: i32,
        lo: u128,
        hi: u128,
        lo_val: f64,
        hi_val: f64,
        f: &mut dyn FnMut(u128, f64),
    ) {
        if hi - lo <= 1 {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let (l, o) = normalize(level, mid);
        let value = 0.5 * (lo_val + hi_val) + midpoint_sd(l) * self.gaussian(side, l, o);
        self.fill_block(side, level, lo, mid, lo_val, value, f);
        f(mid, value);
        self.fill_block(side, level, mid, hi, value, hi_val, f);
    }

    /// All side-local offsets in `first..=last`, increasing.
    fn visit_side(
        &self,
        side: Side,
        level: i32,
        first: u128,
        last: u128,
        f: &mut dyn FnMut(u128, f64),
    ) -> Result<()> {
        let mut cur = first;
        let mut cur_val = self.value_side(side, level, cur)?;
        f(cur, cur_val);
        while cur < last {
            let span = last - cur;
            let mut k = 127 - span.leading_zeros();
            if cur != 0 {
                k = k.min(cur.trailing_zeros());
            }
            let next = cur + (1u128 << k);
            let next_val = self.value_side(side, level, next)?;
            self.fill_block(side, level, cur, next, cur_val, next_val, f);
            f(next, next_val);
            cur = next;
            cur_val = next_val;
        }
        Ok(())
    }
}

impl SamplePath for BrownianPath {
    fn value_at(&self, t: DyadicTime) -> Result<f64> {
        if t.offset >= 0 {
            self.value_side(Side::Positive, t.level, t.offset as u128)
        } else {
            self.value_side(Side::Negative, t.level, t.offset.unsigned_abs())
        }
    }

    fn visit_grid(
        &self,
        level: i32,
        first: i128,
        last: i128,
        f: &mut dyn FnMut(i128, f64),
    ) -> Result<()> {
        if first > last {
            return Ok(());
        }
        if level > self.config.max_level {
            return Err(PathError::ResolutionExceeded {
                level,
                cap: self.config.max_level,
            });
        }
        if first < 0 {
            let neg_last = last.min(-1);
            let mut buf = Vec::new();
            self.visit_side(
                Side::Negative,
                level,
                neg_last.unsigned_abs(),
                first.unsigned_abs(),
                &mut |o, v| buf.push((-(o as i128), v)),
            )?;
            for &(o, v) in buf.iter().rev() {
                f(o, v);
            }
        }
        if last >= 0 {
            let pos_first = first.max(0) as u128;
            self.visit_side(Side::Positive, level, pos_first, last as u128, &mut |o, v| {
                f(o as i128, v)
            })?;
        }
        Ok(())
    }

    fn may_cross(&self, dt: f64, a: f64, b: f64, target: f64) -> bool {
        // Brownian bridge from a to b over dt exceeds c with probability
        // exp(-2 (c - a)(c - b) / dt) when a, b are on the same side of c.
        let exponent = 2.0 * (target - a) * (target - b) / dt;
        exponent < -self.config.prune_probability.ln()
    }

    fn max_level(&self) -> i32 {
        self.config.max_level
    }

    fn modulus_constant(&self) -> f64 {
        self.config.modulus_constant
    }
}

/// Piecewise-linear path through fixed knots, constant outside them.
///
/// Used as a deterministic fixture for the excursion machinery.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPath {
    knots: Vec<(f64, f64)>,
}

impl LinearPath {
    pub fn new(mut knots: Vec<(f64, f64)>) -> Self {
        assert!(!knots.is_empty());
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { knots }
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        if t >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let i = k.partition_point(|p| p.0 <= t);
        let (t0, x0) = k[i - 1];
        let (t1, x1) = k[i];
        x0 + (x1 - x0) * (t - t0) / (t1 - t0)
    }

    /// Image of the path under `(t, x) -> (c^2 t, c x)`.
    pub fn rescaled(&self, c: f64) -> Self {
        Self::new(self.knots.iter().map(|&(t, x)| (c * c * t, c * x)).collect())
    }
}

impl SamplePath for LinearPath {
    fn value_at(&self, t: DyadicTime) -> Result<f64> {
        Ok(self.at(t.to_f64()))
    }
}

/// Inner range `[min, max]` of grid samples over `[lo, hi]` plus a modulus
/// inflation. The grid spacing is the largest power of two not exceeding
/// `(hi - lo) * 2^-level`.
pub fn range_enclosure<P: SamplePath + ?Sized>(
    path: &P,
    lo: f64,
    hi: f64,
    level: i32,
) -> Result<IntervalEnclosure> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(PathError::NonFinite);
    }
    if lo > hi {
        return Err(PathError::InvalidInterval { lo, hi });
    }
    if lo == hi {
        let value = if lo == 0.0 {
            path.value_at(DyadicTime::ZERO)?
        } else {
            let level = (level_for_spacing(lo.abs()) + 52).min(path.max_level());
            path.value_at(DyadicTime::snap(lo, level)?)?
        };
        return Ok(IntervalEnclosure {
            inner_lo: value,
            inner_hi: value,
            outer_lo: value,
            outer_hi: value,
            resolution: f64::INFINITY,
            inflation: 0.0,
        });
    }
    let width = hi - lo;
    let grid = level_for_spacing(ldexp(width, -level.max(0)));
    if grid > path.max_level() {
        return Err(PathError::ResolutionExceeded {
            level: grid,
            cap: path.max_level(),
        });
    }
    let first = DyadicTime::snap(lo, grid)?.offset;
    let last = DyadicTime::snap(hi, grid)?.offset;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    path.visit_grid(grid, first, last, &mut |_, v| {
        min = min.min(v);
        max = max.max(v);
    })?;
    let delta = ldexp(1.0, -grid);
    let inflation = modulus_inflation(path.modulus_constant(), delta, width);
    Ok(IntervalEnclosure {
        inner_lo: min,
        inner_hi: max,
        outer_lo: min - inflation,
        outer_hi: max + inflation,
        resolution: delta,
        inflation,
    })
}

/// [`range_enclosure`] over the exact window `[start, end]`.
pub fn range_enclosure_window<P: SamplePath + ?Sized>(
    path: &P,
    start: DyadicTime,
    end: DyadicTime,
    level: i32,
) -> Result<IntervalEnclosure> {
    let width = end.since(start);
    if width < 0.0 {
        return Err(PathError::InvalidInterval {
            lo: start.to_f64(),
            hi: end.to_f64(),
        });
    }
    if width == 0.0 {
        let value = path.value_at(start)?;
        return Ok(IntervalEnclosure {
            inner_lo: value,
            inner_hi: value,
            outer_lo: value,
            outer_hi: value,
            resolution: f64::INFINITY,
            inflation: 0.0,
        });
    }
    let grid = level_for_spacing(ldexp(width, -level.max(0)));
    if grid > path.max_level() {
        return Err(PathError::ResolutionExceeded {
            level: grid,
            cap: path.max_level(),
        });
    }
    let first = start.ceil_at(grid);
    let last = end.floor_at(grid);
    let mut min = path.value_at(start)?.min(path.value_at(end)?);
    let mut max = path.value_at(start)?.max(path.value_at(end)?);
    if first <= last {
        path.visit_grid(grid, first, last, &mut |_, v| {
            min = min.min(v);
            max = max.max(v);
        })?;
    }
    let delta = ldexp(1.0, -grid);
    let inflation = modulus_inflation(path.modulus_constant(), delta, width);
    Ok(IntervalEnclosure {
        inner_lo: min,
        inner_hi: max,
        outer_lo: min - inflation,
        outer_hi: max + inflation,
        resolution: delta,
        inflation,
    })
}

#[derive(Clone, Copy)]
enum Sweep {
    Up,
    Down,
}

/// `ceil(x / 2^shift)`.
fn ceil_shr(x: u128, shift: u32) -> u128 {
    match x.checked_shr(shift) {
        Some(q) if shift < 128 => q + u128::from(q << shift != x),
        _ => u128::from(x != 0),
    }
}

const SATURATED: u128 = 1 << 126;

/// End point of a hitting search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Limit {
    Time(f64),
    Exact(DyadicTime),
}

impl Limit {
    fn to_f64(self) -> f64 {
        match self {
            Limit::Time(t) => t,
            Limit::Exact(d) => d.to_f64(),
        }
    }

    /// Side-local offset of the limit at `level`, rounded down or up and
    /// saturated; zero when the limit lies on the other side.
    fn side_offset(self, negative: bool, level: i32, up: bool) -> u128 {
        match self {
            Limit::Time(t) => {
                let local = if negative { -t } else { t };
                if !(local > 0.0) {
                    return 0;
                }
                let x = ldexp(local, level);
                if x >= SATURATED as f64 {
                    SATURATED
                } else if up {
                    x.ceil() as u128
                } else {
                    x.floor() as u128
                }
            }
            Limit::Exact(d) => {
                let local = if negative { -d.offset } else { d.offset };
                if local <= 0 {
                    return 0;
                }
                let m = local as u128;
                if level >= d.level {
                    let shift = (level - d.level) as u32;
                    if shift >= 126 || m >= SATURATED >> shift {
                        SATURATED
                    } else {
                        m << shift
                    }
                } else {
                    let shift = (d.level - level) as u32;
                    if up {
                        ceil_shr(m, shift)
                    } else {
                        m.checked_shr(shift).unwrap_or(0)
                    }
                }
            }
        }
    }
}

struct SideSearch<'a, P: ?Sized> {
    path: &'a P,
    side: Side,
    level: i32,
    target: f64,
    /// Sign of `B(start) - target`.
    sign: f64,
    /// Side-local start offset at `level` (excluded from the search).
    start: u128,
    /// Side-local offset bound at `level`: upper for `Up`, lower for `Down`.
    bound: u128,
    sweep: Sweep,
}

impl<'a, P: SamplePath + ?Sized> SideSearch<'a, P> {
    fn value(&self, level: i32, offset: u128) -> Result<f64> {
        let t = if matches!(self.side, Side::Positive) {
            offset as i128
        } else {
            -(offset as i128)
        };
        self.path.value_at(DyadicTime::new(level, t))
    }

    fn crosses(&self, x: f64) -> bool {
        let s = x - self.target;
        s == 0.0 || s.signum() != self.sign
    }

    fn same_side(&self, x: f64) -> bool {
        let s = x - self.target;
        s != 0.0 && s.signum() == self.sign
    }

    fn run(&self) -> Result<Option<u128>> {
        self.cell(TOP_LEVEL, 0)
    }

    fn cell(&self, level: i32, c: u128) -> Result<Option<u128>> {
        let shift = (self.level - level) as u32;
        let start_shifted = self.start.checked_shr(shift).unwrap_or(0);
        let bound_shifted = self.bound.checked_shr(shift).unwrap_or(0);
        match self.sweep {
            Sweep::Up => {
                if c + 1 <= start_shifted || c > bound_shifted {
                    return Ok(None);
                }
            }
            Sweep::Down => {
                if c >= ceil_shr(self.start, shift) || c + 1 < ceil_shr(self.bound, shift) {
                    return Ok(None);
                }
            }
        }
        if level == self.level {
            let cand = match self.sweep {
                Sweep::Up => c + 1,
                Sweep::Down => c,
            };
            let in_bounds = match self.sweep {
                Sweep::Up => cand <= self.bound,
                Sweep::Down => cand >= self.bound,
            };
            if in_bounds && self.crosses(self.value(level, cand)?) {
                return Ok(Some(cand));
            }
            return Ok(None);
        }
        if 2 * c + 2 >= MAX_OFFSET {
            return Err(PathError::ResolutionExceeded {
                level: level + 1,
                cap: level,
            });
        }
        let a = self.value(level, c)?;
        let b = self.value(level, c + 1)?;
        if self.same_side(a)
            && self.same_side(b)
            && !self.path.may_cross(ldexp(1.0, -level), a, b, self.target)
        {
            return Ok(None);
        }
        let (first, second) = match self.sweep {
            Sweep::Up => (2 * c, 2 * c + 1),
            Sweep::Down => (2 * c + 1, 2 * c),
        };
        if let Some(hit) = self.cell(level + 1, first)? {
            return Ok(Some(hit));
        }
        self.cell(level + 1, second)
    }
}

/// First grid time after `from` (at `from.level`) where `B - target` changes
/// sign relative to its sign at `from`, searching toward `limit`.
///
/// Returns `from` itself when `B(from) == target`, and `None` when the limit
/// is reached first.
pub fn first_hit_dyadic<P: SamplePath + ?Sized>(
    path: &P,
    target: f64,
    from: DyadicTime,
    direction: Direction,
    limit: f64,
) -> Result<Option<DyadicTime>> {
    first_hit_within(path, target, from, direction, Limit::Time(limit))
}

/// [`first_hit_dyadic`] with a limit that may be an exact dyadic time.
pub fn first_hit_within<P: SamplePath + ?Sized>(
    path: &P,
    target: f64,
    from: DyadicTime,
    direction: Direction,
    limit: Limit,
) -> Result<Option<DyadicTime>> {
    let level = from.level;
    if level > path.max_level() {
        return Err(PathError::ResolutionExceeded {
            level,
            cap: path.max_level(),
        });
    }
    let x0 = path.value_at(from)?;
    let s0 = x0 - target;
    if s0 == 0.0 {
        return Ok(Some(from));
    }
    let sign = s0.signum();
    let search = |side: Side, start: u128, sweep: Sweep| -> Result<Option<DyadicTime>> {
        let negative = matches!(side, Side::Negative);
        let bound = limit.side_offset(negative, level, matches!(sweep, Sweep::Down));
        let s = SideSearch {
            path,
            side,
            level,
            target,
            sign,
            start,
            bound,
            sweep,
        };
        Ok(s.run()?.map(|o| {
            let off = o as i128;
            DyadicTime::new(level, if negative { -off } else { off })
        }))
    };
    let zero_crosses = {
        let s = -target;
        s == 0.0 || s.signum() != sign
    };
    let lim = limit.to_f64();
    match direction {
        Direction::Forward => {
            if from.offset >= 0 {
                search(Side::Positive, from.offset as u128, Sweep::Up)
            } else {
                // walk toward zero on the negative side, then continue forward
                if let Some(hit) = search(Side::Negative, from.offset.unsigned_abs(), Sweep::Down)? {
                    return Ok(Some(hit));
                }
                if lim < 0.0 {
                    return Ok(None);
                }
                if zero_crosses {
                    return Ok(Some(DyadicTime::new(level, 0)));
                }
                search(Side::Positive, 0, Sweep::Up)
            }
        }
        Direction::Backward => {
            if from.offset <= 0 {
                search(Side::Negative, from.offset.unsigned_abs(), Sweep::Up)
            } else {
                if let Some(hit) = search(Side::Positive, from.offset as u128, Sweep::Down)? {
                    return Ok(Some(hit));
                }
                if lim > 0.0 {
                    return Ok(None);
                }
                if zero_crosses {
                    return Ok(Some(DyadicTime::new(level, 0)));
                }
                search(Side::Negative, 0, Sweep::Up)
            }
        }
    }
}

/// [`first_hit_dyadic`] with `from` snapped to the grid at `level`.
pub fn first_hit<P: SamplePath + ?Sized>(
    path: &P,
    target: f64,
    from: f64,
    direction: Direction,
    level: i32,
    limit: f64,
) -> Result<Option<f64>> {
    let from = DyadicTime::snap(from, level)?;
    Ok(first_hit_dyadic(path, target, from, direction, limit)?.map(DyadicTime::to_f64))
}

/// A hitting time recomputed on a finer grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitAudit {
    pub coarse: Option<f64>,
    pub fine: Option<f64>,
    /// Coarse and fine answers differ by more than one coarse grid step.
    pub disagrees: bool,
}

/// Re-runs a hitting query at `level + 4` and reports disagreement.
pub fn audit_first_hit<P: SamplePath + ?Sized>(
    path: &P,
    target: f64,
    from: f64,
    direction: Direction,
    level: i32,
    limit: f64,
) -> Result<HitAudit> {
    let coarse = first_hit(path, target, from, direction, level, limit)?;
    let fine = first_hit(path, target, from, direction, level + 4, limit)?;
    let step = ldexp(1.0, -level);
    let disagrees = match (coarse, fine) {
        (Some(a), Some(b)) => (a - b).abs() > step,
        (None, None) => false,
        _ => true,
    };
    Ok(HitAudit {
        coarse,
        fine,
        disagrees,
    })
}

/// Writes `(t, value)` rows on the grid at `level` covering `[lo, hi]`.
pub fn dump_csv<P: SamplePath + ?Sized, W: std::io::Write>(
    path: &P,
    lo: f64,
    hi: f64,
    level: i32,
    out: W,
) -> std::result::Result<(), crate::io::OutputError> {
    let first = DyadicTime::snap(lo, level)?.offset;
    let last = DyadicTime::snap(hi, level)?.offset;
    let mut rows = Vec::new();
    path.visit_grid(level, first, last, &mut |o, v| {
        rows.push((DyadicTime::new(level, o).to_f64(), v))
    })?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "value"])?;
    for (t, v) in rows {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_at_zero_is_zero() {
        let p = BrownianPath::new(42);
        assert_eq!(p.eval(0.0, 0).unwrap().value, 0.0);
        assert_eq!(p.eval(0.0, 300).unwrap().value, 0.0);
    }

    #[test]
    fn repeated_queries_are_bit_identical() {
        let p = BrownianPath::new(42);
        let a = p.eval(1.0, 0).unwrap().value;
        let _ = p.eval(0.3, 30).unwrap();
        let b = p.eval(1.0, 0).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn different_seeds_differ() {
        let a = BrownianPath::new(1).eval(1.0, 0).unwrap().value;
        let b = BrownianPath::new(2).eval(1.0, 0).unwrap().value;
        assert_ne!(a, b);
    }

    #[test]
    fn query_order_does_not_matter() {
        let times = [0.1, -0.7, 3.25, 1e-9, -1e-12, 0.5, 17.0];
        let p = BrownianPath::new(9);
        let forward: Vec<f64> = times.iter().map(|&t| p.eval(t, 40).unwrap().value).collect();
        let q = BrownianPath::new(9);
        let backward: Vec<f64> = times
            .iter()
            .rev()
            .map(|&t| q.eval(t, 40).unwrap().value)
            .collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn grid_fill_matches_pointwise_eval() {
        let p = BrownianPath::new(5);
        let q = BrownianPath::new(5);
        let level = 12;
        let mut seen = 0;
        p.visit_grid(level, -300, 517, &mut |o, v| {
            let w = q.value_at(DyadicTime::new(level, o)).unwrap();
            assert_eq!(v.to_bits(), w.to_bits(), "offset {o}");
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 818);
    }

    #[test]
    fn resolution_cap_is_enforced() {
        let p = BrownianPath::new(1);
        assert!(matches!(
            p.eval(0.5, DEFAULT_MAX_LEVEL + 1),
            Err(PathError::ResolutionExceeded { .. })
        ));
        assert!(matches!(
            p.eval(2f64.powi(33), 0),
            Err(PathError::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn degenerate_range_has_no_inflation() {
        let p = BrownianPath::new(3);
        let e = range_enclosure(&p, 0.25, 0.25, 8).unwrap();
        let v = p.eval(0.25, 60).unwrap().value;
        assert_eq!(e.inner(), (v, v));
        assert_eq!(e.outer(), (v, v));
    }

    #[test]
    fn range_rejects_reversed_interval() {
        let p = BrownianPath::new(3);
        assert!(matches!(
            range_enclosure(&p, 1.0, 0.0, 4),
            Err(PathError::InvalidInterval { .. })
        ));
    }

    #[test]
    fn inner_range_grows_with_level() {
        for seed in 0..20 {
            let p = BrownianPath::new(seed);
            let mut prev = range_enclosure(&p, 0.0, 1.0, 4).unwrap();
            assert!(prev.is_well_formed());
            for level in 5..14 {
                let e = range_enclosure(&p, 0.0, 1.0, level).unwrap();
                assert!(e.inner_lo <= prev.inner_lo && e.inner_hi >= prev.inner_hi);
                prev = e;
            }
        }
    }

    #[test]
    fn first_hit_at_start_returns_start() {
        let p = BrownianPath::new(11);
        assert_eq!(first_hit(&p, 0.0, 0.0, Direction::Forward, 20, 1.0).unwrap(), Some(0.0));
    }

    #[test]
    fn first_hit_matches_exhaustive_scan() {
        for seed in 0..40 {
            let p = BrownianPath::new(seed);
            let level = 14;
            let hit = first_hit(&p, 0.4, 0.0, Direction::Forward, level, 4.0).unwrap();
            let mut scan = None;
            p.visit_grid(level, 1, 4 << level, &mut |o, v| {
                if scan.is_none() && v >= 0.4 {
                    scan = Some(DyadicTime::new(level, o).to_f64());
                }
            })
            .unwrap();
            assert_eq!(hit, scan, "seed {seed}");
        }
    }

    #[test]
    fn backward_hit_matches_exhaustive_scan() {
        for seed in 0..40 {
            let p = BrownianPath::new(seed);
            let level = 12;
            let from = DyadicTime::new(level, 3 << level);
            let x0 = p.value_at(from).unwrap();
            let target = x0 - 0.3;
            let hit = first_hit_dyadic(&p, target, from, Direction::Backward, -2.0).unwrap();
            let mut vals = Vec::new();
            p.visit_grid(level, -(2 << level), from.offset - 1, &mut |o, v| vals.push((o, v)))
                .unwrap();
            let scan = vals
                .iter()
                .rev()
                .find(|(_, v)| *v <= target)
                .map(|&(o, _)| DyadicTime::new(level, o));
            assert_eq!(hit, scan, "seed {seed}");
        }
    }

    #[test]
    fn tiny_horizon_rarely_hits_one() {
        let hits = (0..200)
            .filter(|&s| {
                first_hit(&BrownianPath::new(s), 1.0, 0.0, Direction::Forward, 40, 1e-6)
                    .unwrap()
                    .is_some()
            })
            .count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn audit_agrees_on_typical_paths() {
        let p = BrownianPath::new(77);
        let a = audit_first_hit(&p, 0.5, 0.0, Direction::Forward, 16, 100.0).unwrap();
        assert!(a.coarse.is_some() && a.fine.is_some());
        assert!(a.fine.unwrap() <= a.coarse.unwrap());
    }

    #[test]
    fn linear_fixture_interpolates() {
        let f = LinearPath::new(vec![(0.0, 0.0), (1.0, 2.0), (2.0, 0.0)]);
        assert_eq!(f.at(0.5), 1.0);
        assert_eq!(f.at(1.5), 1.0);
        assert_eq!(f.at(3.0), 0.0);
        let g = f.rescaled(0.5);
        assert_eq!(g.at(0.125), 0.5);
    }

    #[test]
    fn level_for_spacing_is_tight() {
        assert_eq!(level_for_spacing(1.0), 0);
        assert_eq!(level_for_spacing(0.75), 1);
        assert_eq!(level_for_spacing(0.5), 1);
        assert_eq!(level_for_spacing(3.0), -1);
        assert_eq!(level_for_spacing(1e-300), 997);
    }
}
