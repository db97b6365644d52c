//! Iterated Brownian motion, interval images, limit intervals and threads.

use iterated_bm::bm_path::IntervalEnclosure;
use iterated_bm::flow::{compose, iterate_eval, limit_interval, thread_distance, thread_sample, PathStack};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let stack = PathStack::new(5, 12)?;
    for n in 1..=3 {
        let x = iterate_eval(&stack, n, 0.75, 30)?;
        println!("I^({n})(0.75) = {:+.6}  (snap error {:.1e})", x.value, x.snap_error);
    }

    let j = IntervalEnclosure::exact(0.0, 1.0);
    let img = compose(&stack, 1, 3, &j, 12)?;
    println!("B_1 B_2 B_3([0, 1]) inner [{:+.4}, {:+.4}]", img.inner_lo, img.inner_hi);

    let a = limit_interval(&stack, 1, (0.0, 1.0), 8, 1e-9, 12)?;
    let b = limit_interval(&stack, 1, (-1.0, 0.5), 8, 1e-9, 12)?;
    println!("limit from [0, 1]:    {:?}  converged {}", a.enclosure.inner(), a.converged);
    println!("limit from [-1, 0.5]: {:?}  converged {}", b.enclosure.inner(), b.converged);
    println!("consecutive distances {:?}", a.distances);

    let t = thread_sample(&stack, 4, 0.3, 24)?;
    let s = thread_sample(&stack, 4, 0.31, 24)?;
    println!("thread from x_4 = 0.3: {:?}", t.coords);
    println!("residuals {:?}", t.residuals);
    println!("distance to the thread from 0.31: {:.4}", thread_distance(&t, &s)?);
    Ok(())
}
