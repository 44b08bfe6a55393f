//! Solves the relaxed core-allocation problem for the bundled three-class
//! workload and checks the answer against the brute-force grid search.
//!
//!     cargo run --example relaxed_lower_bound

use malleable::cli::config::preset;
use malleable::relaxopt::{relax_classes, solve_relaxed, solve_relaxed_grid_oracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = preset("appendix-h")?;
    let classes = relax_classes(&w, 1.0);

    let sol = solve_relaxed(&classes, w.n)?;
    println!("n = {:.4}, load = {:.3}", w.n, w.system_load());
    for (i, (k, r)) in sol.allocations.iter().zip(&sol.effective_loads).enumerate() {
        println!("class {i}: width {k:>9.5}  effective load {r:.5}");
    }
    println!("price {:.10}", sol.price);
    println!("lower bound on normalized holding cost {:.12}", sol.value);

    let grid = solve_relaxed_grid_oracle(&classes, w.n, 0.02)?;
    println!("grid search value {:.12} (relative gap {:.1e})", grid.value, (grid.value / sol.value - 1.0).abs());

    // the bound does not depend on scale
    for d in [10.0, 1000.0] {
        let scaled = solve_relaxed(&relax_classes(&w, d), w.n * d)?;
        println!("d = {d:>6}: value {:.12}", scaled.value);
    }
    Ok(())
}
