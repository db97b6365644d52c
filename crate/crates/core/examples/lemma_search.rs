//! The good-shape search at scale `a` and its failure-probability bound.

use iterated_bm::bm_path::BrownianPath;
use iterated_bm::excursions::{estimate_r, find_good_excursion, ShapeParams};
use iterated_bm::rng::derive_seed;
use iterated_bm::stats::{lemma_bound, verify_lemma_probability};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shape = ShapeParams::default();
    let a = 1e-4;
    let path = BrownianPath::new(derive_seed(9, 0));
    let (found, report) = find_good_excursion(&path, a / 3.0, 2.0 * a / 3.0, a, &shape, 10)?;
    println!(
        "budget {} excursions before t = {:.2e}; inspected {}",
        report.budget, report.time_limit, report.inspected
    );
    match found {
        Some(e) => println!("good excursion on [{:.4e}, {:.4e}]", e.start_time(), e.end_time()),
        None => println!("no good excursion: the search failed on this path"),
    }

    let r = estimate_r(1, 2_000, 0.1, 0.2, &shape, 10)?;
    for a in [1e-4, 1e-6, 1e-8] {
        let b = lemma_bound(a, r.mean)?;
        println!(
            "a = {a:.0e}: k = {:>3}, (1-r)^k = {:.3}, time term = {:.3}, bound = {:.3}, 2a^(1/8) = {:.3}",
            b.k, b.shape_term, b.time_term, b.p_fail_bound, b.simplified_bound
        );
    }
    let rep = verify_lemma_probability(4, 1e-4, 200, &r, &shape, 10)?;
    println!(
        "empirical success at a = 1e-4: {:.3} over {} paths (conservative bound {:.3})",
        rep.empirical.mean, rep.empirical.n, rep.analytic_conservative
    );
    Ok(())
}
