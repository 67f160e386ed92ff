//! Constant fitting on a fixed skeleton.
//!
//! Takes the skeleton C1*sin(x0) + C2 with open constants, fits it against
//! data from 2.5*sin(x0) - 0.75, and prints the recovered values alongside
//! the error metrics the search engines rank candidates by.

use vsr_forge::expr::parse_expression;
use vsr_forge::fit::{fit_batch, FitOptions};
use vsr_forge::oracle::{ControlSpec, DataSource, OracleSpec};

fn main() {
    let truth = parse_expression("2.5*sin(x0)-0.75").unwrap();
    let spec = OracleSpec::new(truth, 1, vec![(-3.0, 3.0)], 0.0).unwrap();
    let batch = spec.sample(&ControlSpec::free(), 256, 7).unwrap();

    let skeleton = parse_expression("C1*sin(x0)+C2").unwrap();
    let fit = fit_batch(&skeleton, &batch, &FitOptions::default(), 7);

    println!("skeleton  {}", skeleton.to_canonical_string(None));
    println!("fitted    {}", skeleton.to_canonical_string(Some(&fit.constants)));
    println!("constants {:?}", fit.constants);
    println!("mse       {:.3e}", fit.mse);
    println!("nmse      {:.3e}", fit.nmse);
    println!("r^2       {:.6}", fit.r_squared());
    println!("reward    {:.6}", fit.reward());

    // A skeleton that cannot express the data bottoms out at a poor reward.
    let wrong = parse_expression("C1*x0+C2").unwrap();
    let bad = fit_batch(&wrong, &batch, &FitOptions::default(), 7);
    println!("\nwrong skeleton {} has reward {:.4}", wrong.to_canonical_string(None), bad.reward());
}
