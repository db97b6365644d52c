//! The witness pipeline: a chain of good-shape excursions under the schedule
//! `a_i = ε^((5/4)^(i-1))`, the nested intervals `U_{i,n}`, `V_{i,n}`, the
//! five conditions, thread classification and `p_ε`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm_path::{hausdorff, ldexp, level_for_spacing, modulus_inflation, DyadicTime, IntervalEnclosure, PathError, SamplePath, DEFAULT_MAX_LEVEL};
use crate::excursions::{
    find_good_excursion, shape_check, Excursion, ExcursionError, ExcursionIter, SearchReport, ShapeParams,
    HIT_LEVEL_OFFSET,
};
use crate::flow::{compose, image, image_window, limit_interval, FlowError, PathStack, Thread};

/// Levels of headroom kept below the resolution cap when predicting depth.
const CAP_HEADROOM: i32 = 16;

/// Excursions examined when looking for a bad-shape replacement.
pub const MUTATION_CANDIDATES: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WitnessError {
    #[error("epsilon must lie in (0, 1), got {0:e}")]
    BadEpsilon(f64),
    #[error("depth {depth} exceeds the numeric cap {cap} for this epsilon")]
    DepthCap { depth: usize, cap: usize },
    #[error("the stack has {have} paths, {need} are needed")]
    StackTooShallow { need: usize, have: usize },
    #[error("level {level} is not available (chain has {available} windows)")]
    MissingWindow { level: usize, available: usize },
    #[error(transparent)]
    Excursion(#[from] ExcursionError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Path(#[from] PathError),
}

pub type Result<T, E = WitnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitnessParams {
    pub epsilon: f64,
    /// Chain depth N.
    pub depth: usize,
    /// Requested truncation n of the U/V compositions.
    pub truncation: usize,
    pub shape: ShapeParams,
    /// Relative level of the shape test.
    pub search_level: i32,
    /// Relative level of images along the chain.
    pub image_level: i32,
    /// Relative level of the limit intervals.
    pub limit_level: i32,
    pub m_max: usize,
    /// Tolerance as a multiple of the enclosure inflation.
    pub tol_factor: f64,
}

impl Default for WitnessParams {
    fn default() -> Self {
        Self {
            epsilon: 1e-16,
            depth: 3,
            truncation: 6,
            shape: ShapeParams::default(),
            search_level: 10,
            image_level: 16,
            limit_level: 12,
            m_max: 8,
            tol_factor: 10.0,
        }
    }
}

impl WitnessParams {
    /// Paths needed: the chain, the limit intervals and one thread level.
    pub fn stack_depth(&self) -> usize {
        (self.depth + self.m_max).max(self.depth + 1)
    }
}

/// `a_1, ..., a_n` with `a_1 = ε` and `a_{i+1} = a_i^(5/4)`.
pub fn schedule(epsilon: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut a = epsilon;
    for _ in 0..n {
        out.push(a);
        a = a.powf(1.25);
    }
    out
}

/// A level is searchable while its band is at least this fraction of its
/// upper end, i.e. spans at least 256 ulps.
pub const MIN_RELATIVE_WIDTH: f64 = 1.0 / (1u64 << 46) as f64;

/// Deepest chain the numeric representation supports for `epsilon`.
///
/// Window widths roughly square from one level to the next, and so does
/// their width relative to their position (about `2^-12` at level 2).
pub fn max_chain_depth(epsilon: f64, params: &WitnessParams) -> usize {
    let rel = (params.search_level + HIT_LEVEL_OFFSET).max(params.image_level);
    let cap = DEFAULT_MAX_LEVEL - CAP_HEADROOM;
    let mut log2_width = epsilon.log2();
    let mut log2_relative = f64::INFINITY;
    let mut depth = 0;
    loop {
        let next = 2.0 * log2_width;
        let needed = (-2.0 * log2_width) as i32 + rel;
        let needed_next = (-2.0 * next) as i32 + params.image_level;
        if needed > cap
            || needed_next > cap
            || next < f64::MIN_EXP as f64 + 64.0
            || log2_relative < MIN_RELATIVE_WIDTH.log2()
        {
            return depth;
        }
        depth += 1;
        log2_width = next;
        log2_relative = if log2_relative.is_infinite() { -12.0 } else { 2.0 * log2_relative };
    }
}

/// One level of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLevel {
    pub i: usize,
    pub u: f64,
    pub v: f64,
    pub a: f64,
    /// Time window `[u_{i+1}, v_{i+1}]` of the chosen excursion of `B_i`.
    pub window: Option<(f64, f64)>,
    #[serde(skip)]
    pub excursion: Option<Excursion>,
    pub shape_ok: bool,
    pub report: Option<SearchReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessChain {
    pub epsilon: f64,
    pub depth: usize,
    pub levels: Vec<ChainLevel>,
    /// First level whose search failed.
    pub failed_at: Option<usize>,
}

impl WitnessChain {
    pub fn is_complete(&self) -> bool {
        self.failed_at.is_none() && self.levels.len() == self.depth && self.levels.iter().all(|l| l.window.is_some())
    }

    /// `[u_1, v_1], [u_2, v_2], ...` as far as the chain reaches.
    pub fn windows(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, self.epsilon)];
        for l in &self.levels {
            match l.window {
                Some(w) => out.push(w),
                None => break,
            }
        }
        out
    }

    /// Exact time window `[u_m, v_m]` for `m >= 2`.
    pub fn exact_window(&self, m: usize) -> Option<(DyadicTime, DyadicTime)> {
        if m < 2 {
            return None;
        }
        self.levels.get(m - 2)?.excursion.map(|e| (e.start, e.end))
    }

    /// Checks `[u_{i+1}, v_{i+1}] ⊆ [0, a_i^(5/4)]` at every level.
    pub fn windows_within_schedule(&self) -> bool {
        self.levels.iter().all(|l| match l.excursion {
            Some(e) => e.start.offset >= 0 && e.duration() > 0.0 && e.end_time() <= l.a.powf(1.25),
            None => true,
        })
    }
}

fn depth_cap_guard(err: ExcursionError, depth: usize, cap: usize) -> WitnessError {
    match err {
        ExcursionError::Path(PathError::ResolutionExceeded { .. }) => WitnessError::DepthCap { depth, cap },
        other => other.into(),
    }
}

fn check_depth(stack: &PathStack, params: &WitnessParams) -> Result<()> {
    if !(params.epsilon > 0.0 && params.epsilon < 1.0) {
        return Err(WitnessError::BadEpsilon(params.epsilon));
    }
    let cap = max_chain_depth(params.epsilon, params);
    if params.depth > cap {
        return Err(WitnessError::DepthCap {
            depth: params.depth,
            cap,
        });
    }
    if stack.depth() < params.depth {
        return Err(WitnessError::StackTooShallow {
            need: params.depth,
            have: stack.depth(),
        });
    }
    Ok(())
}

/// Searches levels `from..=N` starting with window `(u, v)` and appends them.
fn extend_chain(
    stack: &PathStack,
    params: &WitnessParams,
    chain: &mut WitnessChain,
    from: usize,
    mut u: f64,
    mut v: f64,
) -> Result<()> {
    let a = schedule(params.epsilon, params.depth);
    let cap = max_chain_depth(params.epsilon, params);
    for i in from..=params.depth {
        if v - u < v * MIN_RELATIVE_WIDTH {
            return Err(WitnessError::DepthCap {
                depth: params.depth,
                cap: i - 1,
            });
        }
        let path = stack.path(i)?;
        let (found, report) = find_good_excursion(path, u, v, a[i - 1], &params.shape, params.search_level)
            .map_err(|e| depth_cap_guard(e, params.depth, cap))?;
        let window = found.map(|e| e.window());
        chain.levels.push(ChainLevel {
            i,
            u,
            v,
            a: a[i - 1],
            window,
            excursion: found,
            shape_ok: found.is_some(),
            report: Some(report),
        });
        match window {
            Some((s, t)) => (u, v) = (s, t),
            None => {
                chain.failed_at = Some(i);
                break;
            }
        }
    }
    Ok(())
}

/// Runs the good-shape search level by level, `B_i` on `[u_i, v_i]`.
/// A failed search ends the chain and is reported in `failed_at`.
pub fn build_chain(stack: &PathStack, params: &WitnessParams) -> Result<WitnessChain> {
    check_depth(stack, params)?;
    let mut chain = WitnessChain {
        epsilon: params.epsilon,
        depth: params.depth,
        levels: Vec::with_capacity(params.depth),
        failed_at: None,
    };
    extend_chain(stack, params, &mut chain, 1, 0.0, params.epsilon)?;
    Ok(chain)
}

/// Replaces the excursion at level `j` by the worst-shaped one among the
/// first [`MUTATION_CANDIDATES`] excursions of `B_j`, then rebuilds the
/// deeper levels. `None` if no bad-shape excursion is available.
pub fn inject_bad_excursion(
    chain: &WitnessChain,
    stack: &PathStack,
    params: &WitnessParams,
    j: usize,
) -> Result<Option<WitnessChain>> {
    if j == 0 || j > chain.levels.len() {
        return Err(WitnessError::MissingWindow {
            level: j,
            available: chain.levels.len(),
        });
    }
    let level = &chain.levels[j - 1];
    let path = stack.path(j)?;
    let t_max = level.a.powf(1.25);
    let iter = ExcursionIter::new(
        path,
        level.u,
        level.v,
        t_max,
        params.search_level + HIT_LEVEL_OFFSET,
    )?;
    let mut worst: Option<(f64, Excursion)> = None;
    for e in iter.take(MUTATION_CANDIDATES) {
        let e = e?;
        let verdict = shape_check(path, &e, &params.shape, params.search_level)?;
        if !verdict.good && worst.is_none_or(|(v, _)| verdict.violation > v) {
            worst = Some((verdict.violation, e));
        }
    }
    let Some((_, bad)) = worst else {
        return Ok(None);
    };
    let mut mutated = WitnessChain {
        epsilon: chain.epsilon,
        depth: chain.depth,
        levels: chain.levels[..j - 1].to_vec(),
        failed_at: None,
    };
    mutated.levels.push(ChainLevel {
        window: Some(bad.window()),
        excursion: Some(bad),
        shape_ok: false,
        report: None,
        ..level.clone()
    });
    let (s, t) = bad.window();
    extend_chain(stack, params, &mut mutated, j + 1, s, t)?;
    Ok(Some(mutated))
}

fn lower_two_thirds((u, v): (f64, f64)) -> (f64, f64) {
    (u, (u + 2.0 * v) / 3.0)
}

fn upper_two_thirds((u, v): (f64, f64)) -> (f64, f64) {
    ((2.0 * u + v) / 3.0, v)
}

/// Cut points at one and two thirds of an exact window.
fn dyadic_thirds(start: DyadicTime, end: DyadicTime) -> (DyadicTime, DyadicTime) {
    let level = start.level.max(end.level);
    let s = start.floor_at(level);
    let d = end.floor_at(level) - s;
    (
        DyadicTime::new(level, s + d / 3),
        DyadicTime::new(level, s + d - d / 3),
    )
}

/// `(U_{i,n}, V_{i,n})`: images under `B_i ∘ ... ∘ B_{i+n-1}` of the lower
/// and upper two-thirds of `[u_{i+n}, v_{i+n}]`. `level` is relative to the
/// width of each interval imaged.
pub fn build_uv(
    chain: &WitnessChain,
    stack: &PathStack,
    i: usize,
    n: usize,
    level: i32,
) -> Result<(IntervalEnclosure, IntervalEnclosure)> {
    let windows = chain.windows();
    let m = i + n;
    if i == 0 || m > windows.len() {
        return Err(WitnessError::MissingWindow {
            level: m,
            available: windows.len(),
        });
    }
    if n == 0 {
        let (ul, uh) = lower_two_thirds(windows[m - 1]);
        let (vl, vh) = upper_two_thirds(windows[m - 1]);
        return Ok((IntervalEnclosure::exact(ul, uh), IntervalEnclosure::exact(vl, vh)));
    }
    let (start, end) = chain.exact_window(m).ok_or(WitnessError::MissingWindow {
        level: m,
        available: windows.len(),
    })?;
    let (one, two) = dyadic_thirds(start, end);
    let path = stack.path(m - 1)?;
    let u = image_window(path, start, two, level)?;
    let v = image_window(path, one, end, level)?;
    Ok((
        compose(stack, i, n - 1, &u, level)?,
        compose(stack, i, n - 1, &v, level)?,
    ))
}

/// `U_{i,k}`, `V_{i,k}` for `k = 0..=n_i` at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLevel {
    pub i: usize,
    pub n: usize,
    pub u: Vec<IntervalEnclosure>,
    pub v: Vec<IntervalEnclosure>,
    pub tol: f64,
    /// Per `k`, tolerance for `U_{i,k} ⊆ U_{i,k-1}`, carried up from deeper
    /// levels.
    pub nest_tol: Vec<f64>,
}

impl PairLevel {
    pub fn u_last(&self) -> &IntervalEnclosure {
        self.u.last().expect("k = 0 is always present")
    }

    pub fn v_last(&self) -> &IntervalEnclosure {
        self.v.last().expect("k = 0 is always present")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessPair {
    /// Requested truncation.
    pub n: usize,
    pub levels: Vec<PairLevel>,
}

/// Builds all truncations up to `n` at every level that has a window below
/// it; level `i` gets `n_i = min(n, windows - i)`.
pub fn build_pairs(chain: &WitnessChain, stack: &PathStack, params: &WitnessParams) -> Result<WitnessPair> {
    let windows = chain.windows();
    let depth = windows.len();
    let mut levels: Vec<PairLevel> = Vec::new();
    // deepest first: U_{i,k} = B_i(U_{i+1,k-1}) for k >= 2
    for i in (1..depth).rev() {
        let n_i = params.truncation.min(depth - i);
        let (u0, v0) = build_uv(chain, stack, i, 0, params.image_level)?;
        let (u1, v1) = build_uv(chain, stack, i, 1, params.image_level)?;
        let mut u = vec![u0, u1];
        let mut v = vec![v0, v1];
        let path = stack.path(i)?;
        for k in 2..=n_i {
            let next = levels.last().expect("level i + 1 is built first");
            u.push(image(path, &next.u[k - 1], params.image_level)?);
            v.push(image(path, &next.v[k - 1], params.image_level)?);
        }
        u.truncate(n_i + 1);
        v.truncate(n_i + 1);
        let tol = params.tol_factor * u[n_i].inflation.max(v[n_i].inflation);
        // truncation error of U_{i+1,k-1} seen through B_i
        let mut nest_tol = vec![tol; n_i + 1];
        if let Some(next) = levels.last() {
            for k in 2..=n_i {
                let width = next.u[k - 1].outer_width().max(next.v[k - 1].outer_width());
                let carried = modulus_inflation(path.modulus_constant(), next.nest_tol[k - 1], width);
                nest_tol[k] = tol.max(carried);
            }
        }
        levels.push(PairLevel {
            i,
            n: n_i,
            u,
            v,
            tol,
            nest_tol,
        });
    }
    levels.reverse();
    Ok(WitnessPair { n: params.truncation, levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub pass: bool,
    /// Nonnegative exactly when the condition passes.
    pub margin: f64,
}

impl ConditionResult {
    fn from_margin(margin: f64) -> Self {
        Self {
            pass: margin >= 0.0,
            margin,
        }
    }

    fn combine(self, other: Self) -> Self {
        Self::from_margin(self.margin.min(other.margin))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConditions {
    pub i: usize,
    pub n: usize,
    pub tol: f64,
    pub nest_tol: Vec<f64>,
    pub limit_margin: f64,
    pub c1: ConditionResult,
    pub c2: ConditionResult,
    pub c3: ConditionResult,
    pub c4: ConditionResult,
    pub c5: ConditionResult,
    /// `U_{i,k}` and `V_{i,k}` nest for all `k`.
    pub nesting: bool,
}

impl LevelConditions {
    pub fn all(&self) -> [ConditionResult; 5] {
        [self.c1, self.c2, self.c3, self.c4, self.c5]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub levels: Vec<LevelConditions>,
    /// Worst case over levels, per condition.
    pub summary: [ConditionResult; 5],
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.summary.iter().all(|c| c.pass)
    }

    pub fn nesting(&self) -> bool {
        self.levels.iter().all(|l| l.nesting)
    }
}

/// Margin of `inner ⊆ [outer_lo - tol, outer_hi + tol]`.
fn containment(inner: (f64, f64), outer: (f64, f64), tol: f64) -> f64 {
    (inner.0 - (outer.0 - tol)).min(outer.1 + tol - inner.1)
}

/// How far `a` reaches outside `b`: a point of `a.inner` at this distance
/// from `b.outer` witnesses `a ⊄ b`.
fn escape(a: &IntervalEnclosure, b: &IntervalEnclosure) -> f64 {
    (b.outer_lo - a.inner_lo).max(a.inner_hi - b.outer_hi)
}

/// Checks the five conditions at every level of `pairs`.
///
/// 1. `U_{i,n}`, `V_{i,n}` lie in the outer limit interval from `J = [0, 1]`.
/// 2. Each inner interval has a point at least `tol` outside the other's outer.
/// 3. The inner intervals overlap.
/// 4. `B_i(U_{i+1,n-1}) = U_{i,n}` within `tol`, and each truncation lies in
///    the previous one within `nest_tol` (same for V).
/// 5. Outer lengths are at most `a_i + tol`.
pub fn check_conditions(
    chain: &WitnessChain,
    pairs: &WitnessPair,
    stack: &PathStack,
    params: &WitnessParams,
) -> Result<ConditionReport> {
    let a = schedule(chain.epsilon, pairs.levels.len());
    let mut levels = Vec::with_capacity(pairs.levels.len());
    for (p, &a_i) in pairs.levels.iter().zip(&a) {
        let (i, tol) = (p.i, p.tol);
        let (u, v) = (p.u_last(), p.v_last());

        let lim = limit_interval(stack, i, (0.0, 1.0), params.m_max, 0.0, params.limit_level)?;
        let outer = lim.enclosure.outer();
        let c1 = containment(u.outer(), outer, tol).min(containment(v.outer(), outer, tol));

        let c2 = escape(u, v).min(escape(v, u)) - tol;

        let c3 = u.inner_hi.min(v.inner_hi) - u.inner_lo.max(v.inner_lo);

        // one more application of B_i to the next level's truncation; the
        // first stage out of an exact window is U_{i,1} itself
        let next = pairs.levels.iter().find(|q| q.i == i + 1 && q.n + 1 >= p.n);
        let (stage_u, stage_v) = if let (true, Some(next)) = (p.n >= 2, next) {
            let path = stack.path(i)?;
            (
                image(path, &next.u[p.n - 1], params.image_level)?,
                image(path, &next.v[p.n - 1], params.image_level)?,
            )
        } else if p.n >= 2 {
            let (next_u, next_v) = build_uv(chain, stack, i + 1, p.n - 1, params.image_level)?;
            let path = stack.path(i)?;
            (
                image(path, &next_u, params.image_level)?,
                image(path, &next_v, params.image_level)?,
            )
        } else {
            build_uv(chain, stack, i, 1, params.image_level)?
        };
        let du = hausdorff(stage_u.inner(), u.inner());
        let dv = hausdorff(stage_v.inner(), v.inner());
        let mut nest = f64::INFINITY;
        for k in 1..=p.n {
            nest = nest
                .min(containment(p.u[k].inner(), p.u[k - 1].outer(), p.nest_tol[k]))
                .min(containment(p.v[k].inner(), p.v[k - 1].outer(), p.nest_tol[k]));
        }
        let c4 = (tol - du.max(dv)).min(nest);

        let c5 = a_i + tol - u.outer_width().max(v.outer_width());

        levels.push(LevelConditions {
            i,
            n: p.n,
            tol,
            nest_tol: p.nest_tol.clone(),
            limit_margin: lim.margin,
            c1: ConditionResult::from_margin(c1),
            c2: ConditionResult::from_margin(c2),
            c3: ConditionResult::from_margin(c3),
            c4: ConditionResult::from_margin(c4),
            c5: ConditionResult::from_margin(c5),
            nesting: nest >= 0.0,
        });
    }
    let mut summary = [ConditionResult::from_margin(f64::INFINITY); 5];
    for l in &levels {
        for (s, c) in summary.iter_mut().zip(l.all()) {
            *s = s.combine(c);
        }
    }
    Ok(ConditionReport { levels, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadClass {
    Both,
    UOnly,
    VOnly,
    Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadClassification {
    pub class: ThreadClass,
    /// Per coordinate: `(in U_i, in V_i)`.
    pub membership: Vec<(bool, bool)>,
    /// Membership in `U_j` (or `V_j`) carries down to every `i < j`.
    pub propagation_ok: bool,
}

/// Classifies `x_1, ..., x_m` (m = levels in `pairs`) against the outer
/// `U_{i,n}`, `V_{i,n}` widened by each level's tolerance. Coordinates
/// beyond the pair levels are ignored. Propagation is checked from points
/// of the inner `U_j` (or `V_j`) down to every `i < j`.
pub fn classify_thread(thread: &Thread, pairs: &WitnessPair) -> Result<ThreadClassification> {
    let m = thread.len().min(pairs.levels.len());
    if m == 0 {
        return Err(FlowError::LengthMismatch(thread.len(), pairs.levels.len()).into());
    }
    let inside = |x: f64, e: &IntervalEnclosure, tol: f64| x >= e.outer_lo - tol && x <= e.outer_hi + tol;
    let membership: Vec<(bool, bool)> = (0..m)
        .map(|k| {
            let p = &pairs.levels[k];
            let x = thread.coords[k];
            (inside(x, p.u_last(), p.tol), inside(x, p.v_last(), p.tol))
        })
        .collect();
    let strictly = |x: f64, e: &IntervalEnclosure| x >= e.inner_lo && x <= e.inner_hi;
    let propagation_ok = (0..m).all(|j| {
        let p = &pairs.levels[j];
        let x = thread.coords[j];
        (!strictly(x, p.u_last()) || membership[..j].iter().all(|m| m.0))
            && (!strictly(x, p.v_last()) || membership[..j].iter().all(|m| m.1))
    });
    let class = if membership.iter().any(|&(u, v)| !u && !v) {
        ThreadClass::Outside
    } else {
        match membership[m - 1] {
            (true, true) => ThreadClass::Both,
            (true, false) => ThreadClass::UOnly,
            _ => ThreadClass::VOnly,
        }
    };
    Ok(ThreadClassification {
        class,
        membership,
        propagation_ok,
    })
}

/// The thread with `x_{N+1} = t`, a time in the deepest window.
///
/// `x_N = B_N(t)` is exact; each earlier coordinate `x_i = B_i(x_{i+1})` is
/// snapped at `rel` levels below the width of `[u_{i+1}, v_{i+1}]`.
pub fn thread_through(chain: &WitnessChain, stack: &PathStack, t: DyadicTime, rel: i32) -> Result<Thread> {
    let windows = chain.windows();
    let n = windows.len();
    let mut coords = vec![0.0; n];
    coords[n - 1] = t.to_f64();
    let mut residuals = vec![0.0; n - 1];
    let mut residual_bounds = vec![0.0; n - 1];
    let mut levels = vec![t.level; n - 1];
    if n >= 2 {
        coords[n - 2] = stack.path(n - 1)?.value_at(t)?;
    }
    for i in (1..n.saturating_sub(1)).rev() {
        let (lo, hi) = windows[i];
        let level = level_for_spacing(ldexp(hi - lo, -rel)).min(DEFAULT_MAX_LEVEL - 8);
        let path = stack.path(i)?;
        let coarse = path.eval(coords[i], level)?;
        let fine = path.eval(coords[i], level + 8)?;
        coords[i - 1] = coarse.value;
        residuals[i - 1] = (fine.value - coarse.value).abs();
        residual_bounds[i - 1] = coarse.error_bound + fine.error_bound;
        levels[i - 1] = level;
    }
    Ok(Thread {
        coords,
        residuals,
        residual_bounds,
        levels,
    })
}

/// Value and number of factors of `p_ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PEps {
    pub value: f64,
    pub terms: usize,
}

/// `prod_i (1 - 2 a_i^(1/8))`, summed in log space and truncated once
/// `2 a_i^(1/8) < precision`. Zero when some factor is nonpositive.
pub fn p_eps(epsilon: f64, precision: f64) -> Result<PEps> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(WitnessError::BadEpsilon(epsilon));
    }
    let ln_eps = epsilon.ln();
    let mut log_sum = 0.0;
    let mut exponent = 1.0 / 8.0;
    let mut terms = 0;
    loop {
        let term = 2.0 * (ln_eps * exponent).exp();
        if term >= 1.0 {
            return Ok(PEps { value: 0.0, terms: terms + 1 });
        }
        if term < precision || term == 0.0 {
            break;
        }
        log_sum += (-term).ln_1p();
        terms += 1;
        exponent *= 1.25;
    }
    Ok(PEps {
        value: log_sum.exp(),
        terms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub i: usize,
    pub u: f64,
    pub v: f64,
    pub a: f64,
    pub window: Option<(f64, f64)>,
    pub shape_ok: bool,
    pub inspected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub c1: ConditionResult,
    pub c2: ConditionResult,
    pub c3: ConditionResult,
    pub c4: ConditionResult,
    pub c5: ConditionResult,
}

/// Report serialized by the witness command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    pub epsilon: f64,
    pub depth: usize,
    pub seed: u64,
    pub complete: bool,
    pub failed_at: Option<usize>,
    pub per_level: Vec<LevelSummary>,
    pub conditions: Option<ConditionSummary>,
    pub condition_levels: Vec<LevelConditions>,
    pub nesting: Option<bool>,
    pub threads: Vec<ThreadClass>,
    pub propagation_ok: bool,
    pub p_eps_bound: f64,
    /// Level whose excursion was swapped for a bad-shape one.
    pub corrupted_level: Option<usize>,
}

/// Everything produced for one seed stack.
#[derive(Debug, Clone)]
pub struct WitnessRun {
    pub chain: WitnessChain,
    pub pairs: Option<WitnessPair>,
    pub conditions: Option<ConditionReport>,
    pub threads: Vec<ThreadClassification>,
}

/// Chain, pairs, conditions and `threads` classified threads through evenly
/// spaced times of the deepest window.
pub fn run_witness(stack: &PathStack, params: &WitnessParams, threads: usize) -> Result<WitnessRun> {
    evaluate_chain(build_chain(stack, params)?, stack, params, threads)
}

/// Pairs, conditions and thread classes for an already built `chain`.
pub fn evaluate_chain(
    chain: WitnessChain,
    stack: &PathStack,
    params: &WitnessParams,
    threads: usize,
) -> Result<WitnessRun> {
    if !chain.is_complete() {
        return Ok(WitnessRun {
            chain,
            pairs: None,
            conditions: None,
            threads: Vec::new(),
        });
    }
    let pairs = build_pairs(&chain, stack, params)?;
    let conditions = check_conditions(&chain, &pairs, stack, params)?;
    let mut classes = Vec::with_capacity(threads);
    if let (Some((start, end)), false) = (chain.exact_window(chain.windows().len()), pairs.levels.is_empty()) {
        let level = start.level.max(end.level);
        let (s0, d) = (start.floor_at(level), end.floor_at(level) - start.floor_at(level));
        for k in 0..threads as i128 {
            let t = DyadicTime::new(level, s0 + d * (2 * k + 1) / (2 * threads as i128));
            let th = thread_through(&chain, stack, t, params.image_level)?;
            classes.push(classify_thread(&th, &pairs)?);
        }
    }
    Ok(WitnessRun {
        chain,
        pairs: Some(pairs),
        conditions: Some(conditions),
        threads: classes,
    })
}

impl WitnessRun {
    pub fn report(&self, seed: u64, precision: f64) -> Result<WitnessReport> {
        let per_level = self
            .chain
            .levels
            .iter()
            .map(|l| LevelSummary {
                i: l.i,
                u: l.u,
                v: l.v,
                a: l.a,
                window: l.window,
                shape_ok: l.shape_ok,
                inspected: l.report.as_ref().map_or(0, |r| r.inspected),
            })
            .collect();
        let conditions = self.conditions.as_ref().map(|c| ConditionSummary {
            c1: c.summary[0],
            c2: c.summary[1],
            c3: c.summary[2],
            c4: c.summary[3],
            c5: c.summary[4],
        });
        Ok(WitnessReport {
            epsilon: self.chain.epsilon,
            depth: self.chain.depth,
            seed,
            complete: self.chain.is_complete(),
            failed_at: self.chain.failed_at,
            per_level,
            conditions,
            condition_levels: self.conditions.as_ref().map_or_else(Vec::new, |c| c.levels.clone()),
            nesting: self.conditions.as_ref().map(|c| c.nesting()),
            threads: self.threads.iter().map(|t| t.class).collect(),
            propagation_ok: self.threads.iter().all(|t| t.propagation_ok),
            p_eps_bound: p_eps(self.chain.epsilon, precision)?.value,
            corrupted_level: None,
        })
    }
}

/// Sample count behind the shape verdict of a chain level, for reports.
pub fn shape_samples<P: SamplePath + ?Sized>(path: &P, level: &ChainLevel, params: &WitnessParams) -> Result<usize> {
    match &level.excursion {
        Some(e) => Ok(shape_check(path, e, &params.shape, params.search_level)?.samples),
        None => Ok(0),
    }
}
