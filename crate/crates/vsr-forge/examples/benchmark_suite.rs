//! Running a benchmark suite through the library.
//!
//! Mirrors `vsr-forge bench --suite xprod --algorithm gp --seeds 0,1,2` but
//! drives the runner directly and keeps the artifacts in a temp directory.
//! The per-cell table, the aggregate line, and the JSON/CSV artifacts are
//! the same ones the CLI produces.

use vsr_forge::config::{Algorithm, Profile};
use vsr_forge::runner::{bench_table, cmd_bench};

fn main() {
    let out = std::env::temp_dir().join("vsr-forge-example-bench");
    let report = cmd_bench(
        "xprod",
        Algorithm::Gp,
        Profile::Desk,
        &[0, 1, 2],
        Some(1),
        &out,
    )
    .unwrap();

    print!("{}", bench_table(&report));
    println!("\nmedian test nmse {:.3e}", report.aggregates.median_nmse);
    println!("artifacts under  {}", out.display());
}
