//! Lazy two-sided Brownian paths: point values, determinism, range
//! enclosures and a CSV dump.

use iterated_bm::bm_path::{dump_csv, range_enclosure, BrownianPath};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = BrownianPath::new(42);
    for t in [-1.0, -0.25, 0.0, 0.5, 1.0] {
        let s = path.eval(t, 20)?;
        println!("B({t:>5}) = {:+.6}  (snap {:.1e})", s.value, s.snap_distance);
    }
    // same bits no matter what was queried in between
    let again = BrownianPath::new(42);
    again.eval(1e-9, 40)?;
    assert_eq!(again.eval(0.5, 20)?.value, path.eval(0.5, 20)?.value);

    for level in [4, 8, 12] {
        let e = range_enclosure(&path, 0.0, 1.0, level)?;
        println!(
            "level {level:>2}: inner [{:+.4}, {:+.4}]  outer [{:+.4}, {:+.4}]",
            e.inner_lo, e.inner_hi, e.outer_lo, e.outer_hi
        );
    }
    // tiny windows refine on demand
    let tiny = range_enclosure(&path, 1e-40, 2e-40, 10)?;
    println!("range over [1e-40, 2e-40]: width {:.3e}", tiny.inner_width());

    let mut csv = Vec::new();
    dump_csv(&path, -1.0, 1.0, 3, &mut csv)?;
    print!("{}", String::from_utf8(csv)?);
    println!("{} samples cached", path.cached_samples());
    Ok(())
}
