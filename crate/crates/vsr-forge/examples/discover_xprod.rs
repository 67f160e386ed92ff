//! Full vertical discovery on x0*x2 - x1*x3.
//!
//! Four variables, released one per round. Early rounds see the target
//! through a control-variable oracle as a reduced form (round 1: C1*x0 + C2),
//! fit its constants over repeated trials, classify each constant as a
//! standalone value or a summary of still-controlled variables, and re-open
//! the summaries as search targets for the next round.

use vsr_forge::bench::xprod_task;
use vsr_forge::vsr::{run_vsr, VsrConfig};

fn main() {
    let task = xprod_task();
    let source = task.oracle().unwrap();
    let cfg = VsrConfig::desk(task.operators.clone());

    let run = run_vsr(&source, &cfg, 0).unwrap();
    for r in &run.rounds {
        println!(
            "round {} (x{} freed): {}  [{:?}; nmse {:.2e}]",
            r.round,
            r.variable,
            r.best_expr.to_canonical_string(Some(&r.best_constants)),
            r.verdict,
            r.round_nmse,
        );
    }

    let best = run.best().unwrap();
    println!("\nskeleton   {}", best.expr.to_canonical_string(None));
    println!("discovered {}", best.expr.to_canonical_string(Some(&best.constants)));
    println!("truth      {}", task.ground_truth().unwrap().to_canonical_string(None));
    println!("nmse       {:.3e}", best.global_nmse);
}
