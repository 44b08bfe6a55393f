//! Sweep orchestration and report rendering.

use std::fmt::Write as _;

use crate::cli::config::ExperimentConfig;
use crate::meanfield::{Stationary, Trajectory};
use crate::relaxopt::RelaxSolution;
use crate::simulator::{sweep, SimError, SweepRow};

/// Column order of the results CSV. Per-class fields hold one value per
/// class, separated by `;`, in class order.
pub const CSV_COLUMNS: [&str; 13] = [
    "policy",
    "d",
    "n",
    "seed",
    "normalized_cost",
    "cost_ci95",
    "class_id",
    "mean_response",
    "mean_queue_len",
    "mode1_fraction",
    "idle_fraction",
    "lower_bound",
    "flags",
];

/// Runs every cell of the configured sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, SimError> {
    sweep(&cfg.workload, &cfg.sweep_config())
}

fn joined(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn csv_text(header_comment: Option<String>, write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing to memory");
    let body = String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8");
    match header_comment {
        Some(c) => format!("# {c}\n{body}"),
        None => body,
    }
}

/// Results CSV; `timestamp` (seconds since the Unix epoch) adds a comment line.
pub fn render_csv(rows: &[SweepRow], seed: u64, timestamp: Option<u64>) -> String {
    csv_text(timestamp.map(|t| format!("generated_unix_time={t}")), |w| {
        w.write_record(CSV_COLUMNS)?;
        for r in rows {
            let ids: Vec<String> = (0..r.mean_response.len()).map(|i| i.to_string()).collect();
            w.write_record([
                r.policy.to_string(),
                r.d.to_string(),
                r.n.to_string(),
                seed.to_string(),
                r.cost_mean.to_string(),
                r.cost_ci95.to_string(),
                ids.join(";"),
                joined(&r.mean_response),
                joined(&r.mean_queue),
                r.mode1_fraction.to_string(),
                r.idle_fraction.to_string(),
                r.lower_bound.to_string(),
                r.flags.join(";"),
            ])?;
        }
        Ok(())
    })
}

/// Human-readable table: cost, CI and ratio to the lower bound per (policy, d).
pub fn render_summary(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>8} {:>12} {:>10} {:>8}  flags", "policy", "d", "cost", "ci95", "ratio");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>12.6} {:>10.6} {:>8.4}  {}",
            r.policy.as_str(),
            r.d,
            r.cost_mean,
            r.cost_ci95,
            r.ratio(),
            r.flags.join(";")
        );
    }
    if let Some(r) = rows.first() {
        let _ = writeln!(s, "lower bound V* = {:.9}", r.lower_bound);
    }
    s
}

/// One-row CSV with the relaxed optimum: widths, price, value and total effective load.
pub fn render_lower_bound(sol: &RelaxSolution) -> String {
    csv_text(None, |w| {
        let mut header: Vec<String> = (1..=sol.allocations.len()).map(|i| format!("k_{i}")).collect();
        header.extend(["price".into(), "value".into(), "effective_load".into()]);
        w.write_record(&header)?;
        let mut row: Vec<String> = sol.allocations.iter().map(|k| k.to_string()).collect();
        row.extend([sol.price.to_string(), sol.value.to_string(), sol.total_effective_load().to_string()]);
        w.write_record(&row)
    })
}

/// Stationary point as `class,phase,z,width` rows followed by price and cost comments.
pub fn render_stationary(st: &Stationary) -> String {
    let body = csv_text(None, |w| {
        w.write_record(["class", "phase", "z", "width"])?;
        for (i, zi) in st.z.iter().enumerate() {
            for (u, z) in zi.iter().enumerate() {
                w.write_record([i.to_string(), u.to_string(), z.to_string(), st.widths[i].to_string()])?;
            }
        }
        Ok(())
    });
    format!("{body}# price={}\n# cost={}\n", st.price, st.cost)
}

/// Trajectory in long form: `t,class,phase,z`.
pub fn render_trajectory(traj: &Trajectory) -> String {
    csv_text(None, |w| {
        w.write_record(["t", "class", "phase", "z"])?;
        for (t, state) in traj.times.iter().zip(&traj.states) {
            for (i, zi) in state.iter().enumerate() {
                for (u, z) in zi.iter().enumerate() {
                    w.write_record([t.to_string(), i.to_string(), u.to_string(), z.to_string()])?;
                }
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::parse_config;

    fn tiny() -> ExperimentConfig {
        parse_config(
            r#"{"preset": "appendix-h", "scales": [2], "policies": ["wham"],
                "replicas": 1, "horizon": 3000, "seed": 5}"#,
        )
        .unwrap()
    }

    #[test]
    fn single_cell_gives_one_row() {
        let cfg = tiny();
        let rows = run_experiment(&cfg).unwrap();
        let csv = render_csv(&rows, cfg.seed, None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 13);
        assert_eq!(fields[0], "wham");
        assert_eq!(fields[6], "0;1;2");
        assert_eq!(fields[5], "NaN");
    }

    #[test]
    fn reruns_are_byte_identical_apart_from_timestamp() {
        let cfg = tiny();
        let a = render_csv(&run_experiment(&cfg).unwrap(), cfg.seed, None);
        let b = render_csv(&run_experiment(&cfg).unwrap(), cfg.seed, None);
        assert_eq!(a, b);
        let stamped = render_csv(&run_experiment(&cfg).unwrap(), cfg.seed, Some(1_700_000_000));
        assert!(stamped.starts_with("# generated_unix_time=1700000000\n"));
        assert_eq!(&stamped[stamped.find('\n').unwrap() + 1..], a);
    }

    #[test]
    fn summary_reports_ratio() {
        let rows = run_experiment(&tiny()).unwrap();
        let s = render_summary(&rows);
        assert!(s.contains("wham"));
        assert!(s.contains("lower bound V*"));
    }
}
