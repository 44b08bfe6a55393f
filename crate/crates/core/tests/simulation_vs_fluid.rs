use malleable::cli::config::preset;
use malleable::meanfield::{fluid_classes, fluid_stationary};
use malleable::policies::{PolicyKind, Wham};
use malleable::simulator::{run, sweep, RunConfig, SweepConfig};

#[test]
fn wham_job_counts_match_fluid_fixed_point_at_large_scale() {
    let w = preset("appendix-h").unwrap();
    let d = 256.0;
    let st = fluid_stationary(&fluid_classes(&w, 1.0).unwrap(), w.n).unwrap();
    let m = run(&w, &mut Wham::new(&w.classes).unwrap(), &RunConfig::for_arrivals(&w, d, 130_000.0, 0.2, 3)).unwrap();
    for (i, z) in st.class_totals().iter().enumerate() {
        let sim = m.mean_count(i) / d;
        assert!((sim / z - 1.0).abs() < 0.05, "class {i}: simulated {sim} vs fluid {z}");
    }
}

#[test]
fn fwcam_queues_shrink_with_scale() {
    let w = preset("appendix-h").unwrap();
    let rows = sweep(
        &w,
        &SweepConfig {
            scales: vec![4.0, 16.0, 64.0, 256.0],
            policies: vec![PolicyKind::Fwcam],
            replicas: 3,
            arrivals_per_cell: 60_000.0,
            ..SweepConfig::default()
        },
    )
    .unwrap();
    for i in 0..3 {
        let q: Vec<f64> = rows.iter().map(|r| r.mean_queue[i] / r.d).collect();
        assert!(q.windows(2).all(|p| p[1] < p[0]), "class {i}: {q:?}");
    }
    assert!(rows.iter().all(|r| r.lower_bound == rows[0].lower_bound));
}
