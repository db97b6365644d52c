//! First hitting times against the Lévy law and the scaling `T_a = a² T_1`.

use iterated_bm::bm_path::{audit_first_hit, first_hit, BrownianPath, Direction};
use iterated_bm::stats::{hitting_scaling_check, levy_cdf, levy_ks};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = BrownianPath::new(7);
    let t1 = first_hit(&path, 1.0, 0.0, Direction::Forward, 20, 1e6)?;
    println!("T_1 = {t1:?}");
    let back = first_hit(&path, 0.5, 0.0, Direction::Backward, 20, 1e6)?;
    println!("last hit of 0.5 on the negative side: {back:?}");
    let audit = audit_first_hit(&path, 1.0, 0.0, Direction::Forward, 12, 1e6)?;
    println!("audit at level 12 vs 16: {audit:?}");

    println!("P(T_1 <= 1) = {:.4}", levy_cdf(1.0));
    let ks = levy_ks(1, 5_000, 16)?;
    println!(
        "one-sample KS over {} paths: {:.4} (95% critical {:.4})",
        ks.trials, ks.statistic, ks.critical_95
    );
    let sc = hitting_scaling_check(2, 5_000, 0.1, 20)?;
    println!("two-sample KS of T_0.1 / 0.01 vs T_1: {:.4}", sc.statistic);
    Ok(())
}
