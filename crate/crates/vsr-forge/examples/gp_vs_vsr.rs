//! Plain genetic programming vs the vertical variant, same task, same seed.
//!
//! Plain GP breeds full four-variable trees against free samples. Vertical
//! GP runs the same breeding loop inside the control-variable round
//! structure: reduced-form targets first, constants classified over repeated
//! trials, winning skeletons frozen before the next variable is released.

use vsr_forge::bench::xprod_task;
use vsr_forge::gp::{gp_search, vsr_gp_search, GpConfig, VsrGpConfig};

fn main() {
    let task = xprod_task();
    let source = task.oracle().unwrap();
    let seed = 0;

    let gp = gp_search(&source, &task.operators, &GpConfig::desk(), seed).unwrap();
    println!("plain gp    {}", gp.best.expr.to_canonical_string(Some(&gp.best.constants)));
    println!("       nmse {:.3e} after {} generations", gp.best.nmse, gp.history.len());

    let vgp = vsr_gp_search(&source, &VsrGpConfig::desk(task.operators.clone()), seed).unwrap();
    for r in &vgp.rounds {
        println!(
            "round {} (x{}): {}  [{:?}]",
            r.round,
            r.variable,
            r.best_expr.to_canonical_string(Some(&r.best_constants)),
            r.verdict,
        );
    }
    let best = vgp.best().unwrap();
    println!("vertical gp {}", best.expr.to_canonical_string(Some(&best.constants)));
    println!("       nmse {:.3e}", best.global_nmse);
    println!("truth       {}", task.ground_truth().unwrap().to_canonical_string(None));
}
