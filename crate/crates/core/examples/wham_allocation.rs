//! Shows how each policy splits cores for one snapshot of live jobs, and the
//! switch into WHAM's one-core-per-job mode when jobs outnumber cores.
//!
//!     cargo run --example wham_allocation

use malleable::cli::config::preset;
use malleable::policies::{Allocation, JobView, PolicyKind};

fn show(kind: PolicyKind, jobs: &[JobView], n: f64) -> Result<(), Box<dyn std::error::Error>> {
    let w = preset("appendix-h")?;
    let mut policy = kind.build(&w, n / w.n, 0.8)?;
    let mut out = Allocation::default();
    policy.allocate(jobs, n, &mut out);
    let cores: Vec<String> = out.cores.iter().map(|k| format!("{k:6.2}")).collect();
    println!(
        "{:<7} [{}] total {:6.2}{}",
        kind.as_str(),
        cores.join(" "),
        out.total(),
        if out.overload_mode { "  (overload mode)" } else { "" }
    );
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let jobs: Vec<JobView> = [(0, 0.3), (1, 1.2), (1, 0.1), (2, 0.5), (0, 0.05)]
        .iter()
        .enumerate()
        .map(|(i, &(class, remaining))| JobView { id: i as u64, class, arrival: i as f64, remaining })
        .collect();

    println!("five jobs (classes 0,1,1,2,0) on 40 cores:");
    for kind in PolicyKind::ALL {
        show(kind, &jobs, 40.0)?;
    }
    println!("\nthe same five jobs on 3 cores:");
    for kind in [PolicyKind::Wham, PolicyKind::Equi, PolicyKind::Fcfs1] {
        show(kind, &jobs, 3.0)?;
    }
    Ok(())
}
