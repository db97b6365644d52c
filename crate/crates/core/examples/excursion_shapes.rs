//! Successive excursions between two levels and the pentomino shape test.

use iterated_bm::bm_path::BrownianPath;
use iterated_bm::excursions::{completion_ks, decompose_excursions, estimate_r, shape_check, ShapeParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = BrownianPath::new(3);
    let (u, v) = (0.1, 0.2);
    let shape = ShapeParams::default();
    let excursions = decompose_excursions(&path, u, v, 5.0, 16)?;
    println!("{} excursions from {u} to {v} finish by t = 5", excursions.len());
    for e in excursions.iter().take(8) {
        let verdict = shape_check(&path, e, &shape, 10)?;
        println!(
            "  #{:<2} [{:.6}, {:.6}]  good {:<5}  violation {:.3}",
            e.index,
            e.start_time(),
            e.end_time(),
            verdict.good,
            verdict.violation
        );
    }

    let r = estimate_r(11, 2_000, u, v, &shape, 10)?;
    println!("r = P(good shape) ≈ {:.4}  [{:.4}, {:.4}]", r.mean, r.ci_lo, r.ci_hi);
    let r_small = estimate_r(12, 2_000, u / 100.0, v / 100.0, &shape, 10)?;
    println!("at 1/100 scale      ≈ {:.4}  [{:.4}, {:.4}]", r_small.mean, r_small.ci_lo, r_small.ci_hi);

    for c in completion_ks(5, 2_000, u, v, 3, 10)? {
        println!("k = {}: completion ~ T_{:.1}, KS {:.4}", c.k, c.target, c.ks.statistic);
    }
    Ok(())
}
