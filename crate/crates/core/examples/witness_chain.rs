//! The witness chain at ε = 1e-16: nested U/V truncations, the five
//! conditions, thread classes and a corrupted chain.

use iterated_bm::flow::PathStack;
use iterated_bm::witness::{
    build_pairs, check_conditions, inject_bad_excursion, max_chain_depth, p_eps, run_witness, WitnessError,
    WitnessParams,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = WitnessParams::default();
    println!("numeric depth cap at ε = 1e-16: {}", max_chain_depth(params.epsilon, &params));
    println!("p_ε = {:.6}", p_eps(params.epsilon, 1e-17)?.value);

    for seed in 0..4u64 {
        let stack = PathStack::new(seed, params.stack_depth())?;
        let run = match run_witness(&stack, &params, 8) {
            Err(WitnessError::DepthCap { depth, cap }) => {
                println!("seed {seed}: value bands too narrow at depth {depth} (cap {cap})");
                continue;
            }
            other => other?,
        };
        let Some(cond) = &run.conditions else {
            println!("seed {seed}: search failed at level {:?}", run.chain.failed_at);
            continue;
        };
        println!(
            "seed {seed}: windows {:?}",
            run.chain.windows().iter().map(|w| w.1 - w.0).collect::<Vec<_>>()
        );
        for l in &cond.levels {
            let m: Vec<String> = l.all().iter().map(|c| format!("{:+.2}", c.margin / l.tol)).collect();
            println!("  level {} (n = {}): margins / tol {}  nesting {}", l.i, l.n, m.join(" "), l.nesting);
        }
        let classes: Vec<_> = run.threads.iter().map(|t| t.class).collect();
        println!("  threads {classes:?}");

        if let Some(bad) = inject_bad_excursion(&run.chain, &stack, &params, 1)? {
            let pairs = build_pairs(&bad, &stack, &params)?;
            let c = check_conditions(&bad, &pairs, &stack, &params)?;
            println!(
                "  corrupted level 1: c2 {} c4 {}",
                c.levels[0].c2.pass, c.levels[0].c4.pass
            );
        }
    }

    let deeper = WitnessParams { depth: 4, ..params };
    let stack = PathStack::new(0, deeper.stack_depth())?;
    println!("depth 4: {}", run_witness(&stack, &deeper, 0).unwrap_err());
    Ok(())
}
