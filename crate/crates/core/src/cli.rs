//! Config-driven experiments behind the `iterated-bm` binary.
//!
//! Every command is a pure function of the config; per-stage seeds come from
//! `derive_seed(config.seed, tag)`, so outputs do not depend on the number of
//! worker threads.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm_path::DyadicTime;
use crate::excursions::{completion_ks, estimate_r, visit_excursion, ExcursionError, ShapeParams};
use crate::flow::{iterate_eval, limit_interval, FlowError, PathStack};
use crate::io::OutputError;
use crate::rng::derive_seed;
use crate::stats::{hitting_scaling_check, ks_critical_95, levy_ks, verify_lemma_probability, StatsError};
use crate::svg::{render, Panel};
use crate::witness::{build_chain, evaluate_chain, inject_bad_excursion, p_eps, WitnessError, WitnessParams};

const STATS_LEVY: u64 = 1;
const STATS_SCALING: u64 = 2;
const STATS_COMPLETION: u64 = 3;
const STATS_R: u64 = 4;
const STATS_LEMMA: u64 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Witness(#[from] WitnessError),
    #[error(transparent)]
    Excursion(#[from] ExcursionError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

impl CliError {
    /// 2 for config errors, 3 for the depth cap, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Witness(WitnessError::BadEpsilon(_)) => 2,
            CliError::Witness(WitnessError::DepthCap { .. }) => 3,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Paths,
    Witness,
    Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub output_dir: PathBuf,
    pub shape: ShapeParams,
    pub paths: PathsConfig,
    pub witness: WitnessConfig,
    pub stats: StatsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            output_dir: PathBuf::from("out"),
            shape: ShapeParams::default(),
            paths: PathsConfig::default(),
            witness: WitnessConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Iterates `I^(1), ..., I^(n_max)`.
    pub n_max: usize,
    pub lo: f64,
    pub hi: f64,
    /// Plot grid: spacing `2^-grid_level`.
    pub grid_level: i32,
    /// Snap level of each evaluation.
    pub eval_level: i32,
    /// Approximations of the limit interval of `B_1` from `[0, 1]`.
    pub limit_m_max: usize,
    pub limit_level: i32,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            n_max: 3,
            lo: -1.0,
            hi: 1.0,
            grid_level: 10,
            eval_level: 30,
            limit_m_max: 8,
            limit_level: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WitnessConfig {
    pub epsilon: f64,
    pub depth: usize,
    pub truncation: usize,
    pub search_level: i32,
    pub image_level: i32,
    pub limit_level: i32,
    pub m_max: usize,
    pub tol_factor: f64,
    /// Threads pushed down from the deepest window and classified.
    pub thread_samples: usize,
    /// Swap this level's excursion for a bad-shape one (0 = none).
    pub corrupt_level: usize,
    pub p_eps_precision: f64,
    /// Relative level of the excursion curves in the SVG.
    pub plot_level: i32,
}

impl Default for WitnessConfig {
    fn default() -> Self {
        let p = WitnessParams::default();
        Self {
            epsilon: p.epsilon,
            depth: p.depth,
            truncation: p.truncation,
            search_level: p.search_level,
            image_level: p.image_level,
            limit_level: p.limit_level,
            m_max: p.m_max,
            tol_factor: p.tol_factor,
            thread_samples: 16,
            corrupt_level: 0,
            p_eps_precision: 1e-17,
            plot_level: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub hitting_trials: usize,
    pub hitting_level: i32,
    pub scaling_a: f64,
    pub ks_threshold: f64,
    pub completion_trials: usize,
    pub completion_band: (f64, f64),
    pub completion_k: usize,
    pub completion_threshold: f64,
    pub r_trials: usize,
    pub r_bands: Vec<(f64, f64)>,
    pub search_level: i32,
    pub lemma_a: Vec<f64>,
    pub lemma_trials: usize,
    /// `p_eps` sweep over `(0, p_eps_max]`.
    pub p_eps_points: usize,
    pub p_eps_max: f64,
    pub p_eps_precision: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            hitting_trials: 100_000,
            hitting_level: 20,
            scaling_a: 0.1,
            ks_threshold: 0.02,
            completion_trials: 10_000,
            completion_band: (0.1, 0.2),
            completion_k: 3,
            completion_threshold: 0.03,
            r_trials: 10_000,
            r_bands: vec![(0.1, 0.2), (0.001, 0.002)],
            search_level: 10,
            lemma_a: vec![1e-4, 1e-6],
            lemma_trials: 500,
            p_eps_points: 100,
            p_eps_max: 1.0 / 256.0,
            p_eps_precision: 1e-17,
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(what.to_string()))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let p = &self.paths;
        check((1..=8).contains(&p.n_max), "paths.n_max must lie in 1..=8")?;
        check(p.lo < p.hi && p.lo.is_finite() && p.hi.is_finite(), "paths.lo < paths.hi required")?;
        check((0..=20).contains(&p.grid_level), "paths.grid_level must lie in 0..=20")?;
        check((p.grid_level..=60).contains(&p.eval_level), "paths.eval_level must lie in grid_level..=60")?;
        check((0..=30).contains(&p.limit_level), "paths.limit_level must lie in 0..=30")?;
        let w = &self.witness;
        check(w.epsilon > 0.0 && w.epsilon < 1.0, "witness.epsilon must lie in (0, 1)")?;
        check(w.depth <= 8, "witness.depth must be at most 8")?;
        check((0..=24).contains(&w.search_level), "witness.search_level must lie in 0..=24")?;
        check((0..=24).contains(&w.image_level), "witness.image_level must lie in 0..=24")?;
        check((0..=24).contains(&w.limit_level), "witness.limit_level must lie in 0..=24")?;
        check((0..=14).contains(&w.plot_level), "witness.plot_level must lie in 0..=14")?;
        check(w.tol_factor > 0.0, "witness.tol_factor must be positive")?;
        check(w.corrupt_level <= w.depth, "witness.corrupt_level must not exceed depth")?;
        check(w.p_eps_precision > 0.0 && w.p_eps_precision < 1.0, "witness.p_eps_precision must lie in (0, 1)")?;
        let s = &self.stats;
        check(s.hitting_trials > 0 && s.completion_trials > 0, "stats trial counts must be positive")?;
        check(s.r_trials > 0 && s.lemma_trials > 0, "stats trial counts must be positive")?;
        check((0..=40).contains(&s.hitting_level), "stats.hitting_level must lie in 0..=40")?;
        check((0..=20).contains(&s.search_level), "stats.search_level must lie in 0..=20")?;
        check(s.scaling_a > 0.0, "stats.scaling_a must be positive")?;
        let (u, v) = s.completion_band;
        check(0.0 <= u && u < v, "stats.completion_band needs 0 <= u < v")?;
        check(s.completion_k >= 1, "stats.completion_k must be at least 1")?;
        check(s.r_bands.iter().all(|&(u, v)| 0.0 <= u && u < v), "stats.r_bands need 0 <= u < v")?;
        check(s.lemma_a.iter().all(|&a| a > 0.0 && a <= 1.0), "stats.lemma_a must lie in (0, 1]")?;
        check(s.p_eps_points >= 1, "stats.p_eps_points must be at least 1")?;
        check(s.p_eps_max > 0.0 && s.p_eps_max < 1.0, "stats.p_eps_max must lie in (0, 1)")?;
        check(s.p_eps_precision > 0.0 && s.p_eps_precision < 1.0, "stats.p_eps_precision must lie in (0, 1)")?;
        Ok(())
    }

    pub fn witness_params(&self) -> WitnessParams {
        let w = &self.witness;
        WitnessParams {
            epsilon: w.epsilon,
            depth: w.depth,
            truncation: w.truncation,
            shape: self.shape,
            search_level: w.search_level,
            image_level: w.image_level,
            limit_level: w.limit_level,
            m_max: w.m_max,
            tol_factor: w.tol_factor,
        }
    }
}

/// Runs `cmd` on a pool of `config.threads` workers; returns written files.
pub fn run(cmd: Command, config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match cmd {
        Command::Paths => cmd_paths(config),
        Command::Witness => cmd_witness(config),
        Command::Stats => cmd_stats(config),
    })
}

fn out_file(config: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&config.output_dir)?;
    Ok(config.output_dir.join(name))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `I^(1), ..., I^(n_max)` on a dyadic grid of `[lo, hi]` (CSV + SVG) and the
/// approximations of the limit interval of `B_1` (CSV).
pub fn cmd_paths(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let p = &config.paths;
    let depth = p.n_max.max(p.limit_m_max + 1);
    let stack = PathStack::new(config.seed, depth)?;
    let first = DyadicTime::snap(p.lo, p.grid_level).map_err(FlowError::from)?.offset;
    let last = DyadicTime::snap(p.hi, p.grid_level).map_err(FlowError::from)?.offset;
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); p.n_max];
    let mut rows = Vec::new();
    for o in first..=last {
        let t = DyadicTime::new(p.grid_level, o).to_f64();
        let mut row = vec![t.to_string()];
        for (n, s) in series.iter_mut().enumerate() {
            let x = iterate_eval(&stack, n + 1, t, p.eval_level)?.value;
            s.push((t, x));
            row.push(x.to_string());
        }
        rows.push(row);
    }
    let names: Vec<String> = (1..=p.n_max).map(|n| format!("I{n}")).collect();
    let mut header = vec!["t"];
    header.extend(names.iter().map(String::as_str));
    let csv_path = out_file(config, "paths.csv")?;
    write_csv(&csv_path, &header, &rows)?;

    let panels: Vec<Panel> = series
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let mut panel = Panel::fitted(format!("I^({})", n + 1), (p.lo, p.hi), &[s]);
            panel.hrule(0.0).vrule(0.0).line(s.clone(), "steelblue");
            panel
        })
        .collect();
    let svg_path = out_file(config, "paths.svg")?;
    fs::write(&svg_path, render(&panels))?;

    let lim = limit_interval(&stack, 1, (0.0, 1.0), p.limit_m_max, 0.0, p.limit_level)?;
    let lim_rows: Vec<Vec<String>> = lim
        .approximations
        .iter()
        .enumerate()
        .map(|(m, &(lo, hi))| {
            let d = if m == 0 { String::new() } else { lim.distances[m - 1].to_string() };
            vec![m.to_string(), lo.to_string(), hi.to_string(), d]
        })
        .collect();
    let lim_path = out_file(config, "limit_interval.csv")?;
    write_csv(&lim_path, &["m", "inner_lo", "inner_hi", "hausdorff_prev"], &lim_rows)?;
    Ok(vec![csv_path, svg_path, lim_path])
}

/// Chain, conditions, threads and `p_eps` for one seed stack (JSON), with the
/// chain's excursions over the shape grid (SVG).
pub fn cmd_witness(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let params = config.witness_params();
    let w = &config.witness;
    let stack = PathStack::new(config.seed, params.stack_depth())?;
    let mut chain = build_chain(&stack, &params)?;
    let mut corrupted = None;
    if w.corrupt_level > 0 && chain.is_complete() {
        if let Some(bad) = inject_bad_excursion(&chain, &stack, &params, w.corrupt_level)? {
            chain = bad;
            corrupted = Some(w.corrupt_level);
        }
    }
    let run = evaluate_chain(chain, &stack, &params, w.thread_samples)?;
    let mut report = run.report(config.seed, w.p_eps_precision)?;
    report.corrupted_level = corrupted;
    let json_path = out_file(config, "witness.json")?;
    fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")?;

    let mut panels = Vec::new();
    for level in &run.chain.levels {
        let Some(e) = level.excursion else { continue };
        let path = stack.path(level.i)?;
        let mut pts = Vec::new();
        visit_excursion(path, &e, w.plot_level, &mut |f, x| pts.push((f, (x - e.u) / (e.v - e.u))))?;
        let verdict = if level.shape_ok { "good" } else { "bad" };
        let mut panel = Panel::new(format!("B_{} excursion, {verdict} shape", level.i), (0.0, 1.0), (-0.1, 1.1));
        for (ti, col) in config.shape.occupancy.iter().enumerate() {
            for (vi, &on) in col.iter().enumerate() {
                if on {
                    let (t0, v0) = (ti as f64 / 3.0, vi as f64 / 3.0);
                    panel.rect((t0, v0), (t0 + 1.0 / 3.0, v0 + 1.0 / 3.0), "seagreen");
                }
            }
        }
        for k in 1..3 {
            panel.vrule(k as f64 / 3.0).hrule(k as f64 / 3.0);
        }
        panel.line(pts, if level.shape_ok { "black" } else { "firebrick" });
        panels.push(panel);
    }
    let svg_path = out_file(config, "witness.svg")?;
    fs::write(&svg_path, render(&panels))?;
    Ok(vec![json_path, svg_path])
}

fn pass(ok: bool) -> String {
    ok.to_string()
}

/// Monte-Carlo tables: hitting laws, completion times, `r̂`, the search
/// lemma and a `p_eps` sweep.
pub fn cmd_stats(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let s = &config.stats;
    let seed = config.seed;
    let mut files = Vec::new();

    let levy = levy_ks(derive_seed(seed, STATS_LEVY), s.hitting_trials, s.hitting_level)?;
    let scaling = hitting_scaling_check(derive_seed(seed, STATS_SCALING), s.hitting_trials, s.scaling_a, s.hitting_level)?;
    let rows = vec![
        vec![
            "levy_one_sample".into(),
            "1".into(),
            levy.trials.to_string(),
            levy.completed.to_string(),
            levy.statistic.to_string(),
            levy.critical_95.to_string(),
            s.ks_threshold.to_string(),
            pass(levy.statistic <= s.ks_threshold),
        ],
        vec![
            "scaling_two_sample".into(),
            s.scaling_a.to_string(),
            scaling.trials.to_string(),
            scaling.completed_a.min(scaling.completed_1).to_string(),
            scaling.statistic.to_string(),
            (ks_critical_95(scaling.trials) * std::f64::consts::SQRT_2).to_string(),
            s.ks_threshold.to_string(),
            pass(scaling.statistic <= s.ks_threshold),
        ],
    ];
    let path = out_file(config, "hitting_ks.csv")?;
    write_csv(
        &path,
        &["test", "a", "trials", "completed", "statistic", "critical_95", "threshold", "pass"],
        &rows,
    )?;
    files.push(path);

    let (u, v) = s.completion_band;
    let completion = completion_ks(
        derive_seed(seed, STATS_COMPLETION),
        s.completion_trials,
        u,
        v,
        s.completion_k,
        s.search_level,
    )?;
    let rows: Vec<Vec<String>> = completion
        .iter()
        .map(|c| {
            vec![
                c.k.to_string(),
                c.target.to_string(),
                c.ks.trials.to_string(),
                c.ks.completed.to_string(),
                c.ks.statistic.to_string(),
                s.completion_threshold.to_string(),
                pass(c.ks.statistic <= s.completion_threshold),
            ]
        })
        .collect();
    let path = out_file(config, "completion_ks.csv")?;
    write_csv(&path, &["k", "target", "trials", "completed", "statistic", "threshold", "pass"], &rows)?;
    files.push(path);

    let r_seed = derive_seed(seed, STATS_R);
    let estimates = s
        .r_bands
        .iter()
        .map(|&(u, v)| estimate_r(r_seed, s.r_trials, u, v, &config.shape, s.search_level))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<Vec<String>> = s
        .r_bands
        .iter()
        .zip(&estimates)
        .map(|(&(u, v), r)| {
            vec![
                u.to_string(),
                v.to_string(),
                r.n.to_string(),
                r.mean.to_string(),
                r.ci_lo.to_string(),
                r.ci_hi.to_string(),
            ]
        })
        .collect();
    let path = out_file(config, "r_estimate.csv")?;
    write_csv(&path, &["u", "v", "n", "r_hat", "ci_lo", "ci_hi"], &rows)?;
    files.push(path);

    if let Some(r) = estimates.first() {
        let mut rows = Vec::new();
        for (k, &a) in s.lemma_a.iter().enumerate() {
            let rep = verify_lemma_probability(
                derive_seed(derive_seed(seed, STATS_LEMMA), k as u64),
                a,
                s.lemma_trials,
                r,
                &config.shape,
                s.search_level,
            )?;
            rows.push(vec![
                a.to_string(),
                rep.bound.k.to_string(),
                rep.bound.r.to_string(),
                rep.empirical.mean.to_string(),
                rep.empirical.ci_lo.to_string(),
                rep.empirical.ci_hi.to_string(),
                (1.0 - rep.bound.p_fail_bound).to_string(),
                rep.analytic_conservative.to_string(),
                rep.simplified.to_string(),
                rep.simplified_vacuous.to_string(),
                rep.consistent().to_string(),
            ]);
        }
        let path = out_file(config, "lemma.csv")?;
        write_csv(
            &path,
            &[
                "a",
                "k",
                "r_hat",
                "empirical",
                "ci_lo",
                "ci_hi",
                "analytic_bound",
                "analytic_conservative",
                "simplified_bound",
                "simplified_bound_vacuous",
                "consistent",
            ],
            &rows,
        )?;
        files.push(path);
    }

    let rows = p_eps_sweep(s.p_eps_max, s.p_eps_points, s.p_eps_precision)?
        .into_iter()
        .map(|(e, p, t)| vec![e.to_string(), p.to_string(), t.to_string()])
        .collect::<Vec<_>>();
    let path = out_file(config, "p_eps.csv")?;
    write_csv(&path, &["epsilon", "p_eps", "terms"], &rows)?;
    files.push(path);
    Ok(files)
}

/// `(ε, p_ε, factors used)` at `ε = max · k / points`, `k = 1..=points`.
pub fn p_eps_sweep(max: f64, points: usize, precision: f64) -> Result<Vec<(f64, f64, usize)>> {
    (1..=points)
        .map(|k| {
            let e = max * k as f64 / points as f64;
            let p = p_eps(e, precision)?;
            Ok((e, p.value, p.terms))
        })
        .collect()
}
