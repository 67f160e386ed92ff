//! Recovering the Lorenz right-hand sides from state queries.
//!
//! Each component of the vector field is a separate discovery problem. The
//! oracle answers with the exact field evaluated at sampled states (the
//! "direct" mode); swap in `OdeFieldSource::finite_difference` to difference
//! short simulated trajectories instead and see the recovered coefficients
//! pick up discretization bias.

use vsr_forge::bench::lorenz;
use vsr_forge::fit::r_squared;
use vsr_forge::oracle::{ControlSpec, DataSource, OdeFieldSource};
use vsr_forge::vsr::{run_vsr, VsrConfig};

fn main() {
    let system = lorenz();
    for dim in 0..3 {
        let source = OdeFieldSource::direct(system.clone(), dim);
        let cfg = VsrConfig::desk(vec![
            vsr_forge::grammar::Operator::Add,
            vsr_forge::grammar::Operator::Sub,
            vsr_forge::grammar::Operator::Mul,
        ]);
        let run = run_vsr(&source, &cfg, 0).unwrap();
        let best = run.best().unwrap();

        let test = source.sample(&ControlSpec::free(), 256, 12345).unwrap();
        let pred = best.expr.evaluate(&best.constants, test.x.view()).unwrap();
        println!(
            "dx{dim}/dt = {}\n         r^2 {:.6} on held-out states\n",
            best.expr.to_canonical_string(Some(&best.constants)),
            r_squared(pred.view(), test.y.view()),
        );
    }
}
