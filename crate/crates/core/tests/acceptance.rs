//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one line; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use iterated_bm::bm_path::hausdorff;
use iterated_bm::cli::{self, Command, ExperimentConfig};
use iterated_bm::excursions::{completion_ks, estimate_r, ShapeParams};
use iterated_bm::flow::{limit_interval, PathStack};
use iterated_bm::rng::derive_seed;
use iterated_bm::stats::{
    excursion_budget, hitting_scaling_check, levy_ks, levy_pdf, verify_lemma_probability, McEstimate,
};
use iterated_bm::witness::{
    build_chain, build_pairs, check_conditions, evaluate_chain, inject_bad_excursion, p_eps, WitnessError,
    WitnessParams,
};

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Composite 5-point Gauss-Legendre on `[a, b]`.
fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let nodes = [
        (0.0, 0.568_888_888_888_888_9),
        (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
        (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
        (0.906_179_845_938_664, 0.236_926_885_056_189_08),
    ];
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let mid = a + (i as f64 + 0.5) * h;
            nodes.iter().map(|&(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

fn levy_law() -> Outcome {
    let start = Instant::now();
    let ks = levy_ks(derive_seed(SEED, 1), 100_000, 20).expect("levy sample");
    let elapsed = start.elapsed().as_secs_f64();
    // t = 1/s² turns the density into a smooth integrand on s > 0
    let mass = gauss_legendre(|s| levy_pdf(1.0 / (s * s)) * 2.0 / (s * s * s), 0.0, 40.0, 4000);
    let pass = ks.statistic <= 0.02 && (mass - 1.0).abs() <= 1e-6 && elapsed <= 120.0;
    outcome(
        pass,
        format!(
            "KS {:.4} (95% critical {:.4}), pdf mass 1{:+.1e}, {:.1}s",
            ks.statistic,
            ks.critical_95,
            mass - 1.0,
            elapsed
        ),
    )
}

fn scaling_law() -> Outcome {
    let r = hitting_scaling_check(derive_seed(SEED, 2), 100_000, 0.1, 20).expect("scaling sample");
    outcome(
        r.statistic <= 0.02,
        format!(
            "two-sample KS {:.4} at a = 0.1 ({} and {} of {} completed)",
            r.statistic, r.completed_a, r.completed_1, r.trials
        ),
    )
}

fn completion_times() -> Outcome {
    let reports = completion_ks(derive_seed(SEED, 3), 10_000, 0.1, 0.2, 3, 10).expect("completion sample");
    let pass = reports.len() == 3 && reports.iter().all(|c| c.ks.statistic <= 0.03);
    let parts: Vec<String> = reports.iter().map(|c| format!("k={} KS {:.4}", c.k, c.ks.statistic)).collect();
    outcome(pass, parts.join(", "))
}

fn r_estimates(shape: &ShapeParams) -> (Outcome, McEstimate) {
    let seed = derive_seed(SEED, 4);
    let coarse = estimate_r(seed, 10_000, 0.1, 0.2, shape, 10).expect("r at (0.1, 0.2)");
    let fine = estimate_r(seed ^ 1, 10_000, 0.001, 0.002, shape, 10).expect("r at (0.001, 0.002)");
    let pass = coarse.ci_lo > 0.0 && fine.ci_lo > 0.0 && coarse.overlaps(&fine);
    let o = outcome(
        pass,
        format!(
            "r̂ {:.4} [{:.4}, {:.4}] vs {:.4} [{:.4}, {:.4}]",
            coarse.mean, coarse.ci_lo, coarse.ci_hi, fine.mean, fine.ci_lo, fine.ci_hi
        ),
    );
    (o, coarse)
}

fn lemma(r: &McEstimate, shape: &ShapeParams) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (tag, (a, k)) in [(1e-4, 10u64), (1e-6, 31u64)].into_iter().enumerate() {
        let budget_ok = excursion_budget(a) == k;
        let rep = verify_lemma_probability(derive_seed(SEED, 50 + tag as u64), a, 500, r, shape, 10)
            .expect("lemma trials");
        pass &= budget_ok && rep.bound.k == k && rep.consistent();
        parts.push(format!(
            "a={a:e} k={} success {:.3}±{:.3} vs bound {:.3}",
            rep.bound.k,
            rep.empirical.mean,
            3.0 * rep.empirical.sigma(),
            rep.analytic_conservative
        ));
    }
    outcome(pass, parts.join("; "))
}

fn p_eps_checks() -> Outcome {
    // 50-digit evaluations of the log-sum
    let oracle = [
        (1e-16, 0.972_073_073_721_646_8),
        (1e-8, 0.650_056_900_171_128_9),
        (1e-24, 0.997_601_227_551_754_1),
    ];
    let oracle_err = oracle
        .iter()
        .map(|&(e, want)| (p_eps(e, 1e-18).unwrap().value - want).abs())
        .fold(0.0, f64::max);
    let zero_ok = [0.1, 0.5, 2f64.powi(-8), 0.9].iter().all(|&e| p_eps(e, 1e-17).unwrap().value == 0.0)
        && [2f64.powi(-8) * 0.999, 1e-3].iter().all(|&e| {
            let p = p_eps(e, 1e-17).unwrap().value;
            (p == 0.0) == (2.0 * e.powf(0.125) >= 1.0)
        });
    let sweep = cli::p_eps_sweep(1.0 / 256.0, 100, 1e-17).unwrap();
    let monotone = sweep.windows(2).all(|w| w[1].1 <= w[0].1);
    let p16 = p_eps(1e-16, 1e-17).unwrap().value;
    let pass = oracle_err <= 1e-12 && zero_ok && monotone && p16 > 0.95 && p16 < 0.99;
    outcome(
        pass,
        format!("oracle error {oracle_err:.1e}, zero rule {zero_ok}, monotone {monotone}, p(1e-16) = {p16:.6}"),
    )
}

fn witness_pipeline() -> Outcome {
    let params = WitnessParams::default();
    let stacks = 200u64;
    let (mut complete, mut failed, mut capped, mut bad) = (0, 0, 0, Vec::new());
    let (mut injected, mut detected, mut unfinished) = (0, 0, 0);
    for s in 0..stacks {
        let seed = derive_seed(SEED, 1000 + s);
        let stack = PathStack::new(seed, params.stack_depth()).expect("stack");
        let run = match build_chain(&stack, &params).and_then(|c| evaluate_chain(c, &stack, &params, 8)) {
            Err(WitnessError::DepthCap { .. }) => {
                capped += 1;
                continue;
            }
            other => other.expect("witness run"),
        };
        let Some(cond) = &run.conditions else {
            failed += 1;
            continue;
        };
        complete += 1;
        let threads_ok = run.threads.iter().all(|t| t.propagation_ok);
        if !(cond.all_pass() && cond.nesting() && threads_ok) {
            bad.push(s);
        }
        for j in 1..params.depth {
            let mutated = match inject_bad_excursion(&run.chain, &stack, &params, j) {
                Ok(Some(m)) if m.is_complete() => m,
                Ok(_) | Err(WitnessError::DepthCap { .. }) => {
                    unfinished += 1;
                    continue;
                }
                Err(e) => panic!("injection: {e}"),
            };
            let report = match build_pairs(&mutated, &stack, &params)
                .and_then(|p| check_conditions(&mutated, &p, &stack, &params))
            {
                Ok(r) => r,
                Err(WitnessError::DepthCap { .. }) => {
                    unfinished += 1;
                    continue;
                }
                Err(e) => panic!("mutated chain: {e}"),
            };
            injected += 1;
            if report.levels.iter().any(|l| !l.c2.pass || !l.c4.pass) {
                detected += 1;
            }
        }
    }
    let pass = stacks >= 200 && complete > 0 && bad.is_empty() && injected > 0 && detected == injected;
    outcome(
        pass,
        format!(
            "{stacks} stacks: {complete} complete, {failed} search failures, {capped} depth caps; \
             failing chains {bad:?}; mutations detected {detected}/{injected} ({unfinished} did not complete)"
        ),
    )
}

fn j_independence() -> Outcome {
    let (m_max, level) = (8, 12);
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for s in 0..50u64 {
        let stack = PathStack::new(derive_seed(SEED, 2000 + s), m_max + 1).expect("stack");
        let a = limit_interval(&stack, 1, (0.0, 1.0), m_max, 0.0, level).expect("limit from [0, 1]");
        let b = limit_interval(&stack, 1, (-1.0, 0.5), m_max, 0.0, level).expect("limit from [-1, 0.5]");
        let d = hausdorff(a.enclosure.inner(), b.enclosure.inner());
        let allowed = 2.0 * a.margin.max(b.margin);
        worst = worst.max(d / allowed);
        if d > allowed {
            failures.push(s);
        }
    }
    outcome(
        failures.is_empty(),
        format!("50 seeds, worst distance / (2 margin) = {worst:.3}, failing {failures:?}"),
    )
}

fn read_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).expect("output dir") {
        let path = entry.expect("dir entry").path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext == "csv" || ext == "json" {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            files.insert(name, fs::read(&path).expect("output file"));
        }
    }
    files
}

fn determinism() -> Outcome {
    let mut config = ExperimentConfig {
        seed: 7,
        ..ExperimentConfig::default()
    };
    config.stats.hitting_trials = 2_000;
    config.stats.completion_trials = 500;
    config.stats.r_trials = 500;
    config.stats.lemma_trials = 50;
    config.paths.grid_level = 8;
    let runs: Vec<BTreeMap<String, Vec<u8>>> = [1usize, 1, 2, 2]
        .iter()
        .map(|&threads| {
            let dir = tempfile::tempdir().expect("tempdir");
            let mut c = config.clone();
            c.threads = threads;
            c.output_dir = dir.path().to_path_buf();
            for cmd in [Command::Paths, Command::Witness, Command::Stats] {
                cli::run(cmd, &c).expect("cli run");
            }
            read_outputs(dir.path())
        })
        .collect();
    let pass = !runs[0].is_empty() && runs.iter().all(|r| r == &runs[0]);
    outcome(
        pass,
        format!(
            "{} CSV/JSON files identical over 2 runs at 1 and 2 threads: {}",
            runs[0].len(),
            runs.iter().all(|r| r == &runs[0])
        ),
    )
}

fn main() -> ExitCode {
    let shape = ShapeParams::default();
    let mut results = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, "levy law", levy_law());
    report(2, "hitting time scaling", scaling_law());
    report(3, "excursion completion times", completion_times());
    let (r_outcome, r_hat) = r_estimates(&shape);
    report(4, "good-shape probability", r_outcome);
    report(5, "good-shape search", lemma(&r_hat, &shape));
    report(6, "p_eps", p_eps_checks());
    report(7, "witness pipeline", witness_pipeline());
    report(8, "limit interval independence", j_independence());
    report(9, "determinism", determinism());
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
