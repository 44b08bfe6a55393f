//! Simulates every policy once on the bundled workload at one scale.
//!
//!     cargo run --release --example simulate_policies -- 32

use malleable::cli::config::preset;
use malleable::policies::PolicyKind;
use malleable::relaxopt::value_lower_bound;
use malleable::simulator::{run, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d: f64 = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(16.0);
    let w = preset("appendix-h")?;
    let bound = value_lower_bound(&w)?;
    let cfg = RunConfig::for_arrivals(&w, d, 100_000.0, 0.2, 2024);

    println!("d = {d}, n = {:.1} cores, lower bound {bound:.5}", w.cores_at(d));
    println!("{:<7} {:>9} {:>7} {:>9} {:>7} {:>7}", "policy", "cost", "ratio", "jobs", "idle", "mode1");
    for kind in PolicyKind::ALL {
        let mut policy = kind.build(&w, d, 0.8)?;
        let m = run(&w, policy.as_mut(), &cfg)?;
        let jobs: f64 = (0..w.classes.len()).map(|i| m.mean_count(i)).sum();
        println!(
            "{:<7} {:>9.5} {:>7.3} {:>9.2} {:>7.3} {:>7.3}{}",
            kind.as_str(),
            m.normalized_cost(),
            m.normalized_cost() / bound,
            jobs,
            m.idle_fraction(),
            m.mode1_fraction(),
            if m.unstable { "  unstable" } else { "" }
        );
    }
    Ok(())
}
