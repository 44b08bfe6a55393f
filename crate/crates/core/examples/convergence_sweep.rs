//! Cost-to-bound ratio of WHAM and FW-CAM as the system scales up, with
//! confidence intervals over replicas. Smaller than the full CLI sweep.
//!
//!     cargo run --release --example convergence_sweep

use malleable::cli::config::preset;
use malleable::cli::experiment::render_summary;
use malleable::policies::PolicyKind;
use malleable::simulator::{sweep, SweepConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let w = preset("appendix-h")?;
    let cfg = SweepConfig {
        scales: vec![4.0, 16.0, 64.0],
        policies: vec![PolicyKind::Wham, PolicyKind::Fwcam, PolicyKind::Equi],
        replicas: 4,
        arrivals_per_cell: 40_000.0,
        base_seed: 7,
        ..SweepConfig::default()
    };
    let rows = sweep(&w, &cfg)?;
    print!("{}", render_summary(&rows));
    Ok(())
}
