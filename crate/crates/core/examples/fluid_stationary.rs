//! Fixed point of the WHAM fluid model and a trajectory converging to it.
//!
//!     cargo run --release --example fluid_stationary

use malleable::cli::config::preset;
use malleable::meanfield::{fluid_classes, fluid_integrate, fluid_stationary, zero_state};
use malleable::relaxopt::value_lower_bound;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = preset("appendix-h")?;
    let classes = fluid_classes(&w, 1.0)?;
    let st = fluid_stationary(&classes, w.n)?;

    println!("price {:.10}", st.price);
    for (i, (zi, g)) in st.z.iter().zip(&st.widths).enumerate() {
        println!("class {i}: width {g:.5}, mass per phase {zi:.6?}");
    }
    println!("stationary cost {:.12}", st.cost);
    println!("lower bound     {:.12}", value_lower_bound(&w)?);

    let traj = fluid_integrate(&zero_state(&classes), &classes, w.n, 20.0, 0.05, 2.0)?;
    println!("\nfrom empty (step {}):", traj.step);
    for (t, z) in traj.times.iter().zip(&traj.states) {
        let totals: Vec<String> = z.iter().map(|zi| format!("{:.5}", zi.iter().sum::<f64>())).collect();
        println!("t = {t:>5.1}: {}", totals.join("  "));
    }
    Ok(())
}
