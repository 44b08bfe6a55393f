//! Frozen reference values for the bundled three-class workload. The widths,
//! price and value were computed with the grid-search solver and agree with
//! the price-bisection solver to well under the tolerances used here.

use malleable::cli::config::preset;
use malleable::meanfield::{fluid_classes, fluid_stationary};
use malleable::policies::{Allocation, Greedy, JobView, Policy};
use malleable::relaxopt::{relax_classes, solve_relaxed, solve_relaxed_grid_oracle};
use malleable::speedup::SpeedupFunction;
use malleable::workload::{ArrivalProcess, JobClass, PhaseTypeDist, SizeDist};

const WIDTHS: [f64; 3] = [5.4066664, 25.2311098, 7.1036765];
const PRICE: f64 = 0.0792672226826;
const VALUE: f64 = 0.157848498385693;
const MASS: [f64; 3] = [0.1205455, 0.2212021, 0.1736765];

#[test]
fn relaxed_optimum_of_bundled_workload() {
    let w = preset("appendix-h").unwrap();
    let sol = solve_relaxed(&relax_classes(&w, 1.0), w.n).unwrap();
    for (k, want) in sol.allocations.iter().zip(WIDTHS) {
        assert!((k - want).abs() < 1e-6, "{k} vs {want}");
    }
    assert!((sol.price / PRICE - 1.0).abs() < 1e-9);
    assert!((sol.value / VALUE - 1.0).abs() < 1e-12);
    let grid = solve_relaxed_grid_oracle(&relax_classes(&w, 1.0), w.n, 0.02).unwrap();
    assert!((grid.value / VALUE - 1.0).abs() < 1e-9);
}

#[test]
fn fluid_fixed_point_of_bundled_workload() {
    let w = preset("appendix-h").unwrap();
    let st = fluid_stationary(&fluid_classes(&w, 1.0).unwrap(), w.n).unwrap();
    for (z, want) in st.class_totals().iter().zip(MASS) {
        assert!((z - want).abs() < 1e-6, "{z} vs {want}");
    }
    assert!((st.price / PRICE - 1.0).abs() < 1e-9);
    assert!((st.cost / VALUE - 1.0).abs() < 1e-9);
}

#[test]
fn greedy_splits_ten_cores_by_marginal_speedup() {
    // root of 0.3 k^-0.7 = 0.5 (10 - k)^-0.5 found by bisection to 1e-14
    let classes: Vec<JobClass> = [0.3, 0.5]
        .iter()
        .map(|&p| {
            JobClass::new(
                ArrivalProcess::Poisson { rate: 1.0 },
                SizeDist::PhaseType(PhaseTypeDist::exponential(1.0).unwrap()),
                1.0,
                SpeedupFunction::power(p).unwrap(),
            )
        })
        .collect();
    let jobs: Vec<JobView> =
        (0..2).map(|i| JobView { id: i, class: i as usize, arrival: 0.0, remaining: 1.0 }).collect();
    let mut out = Allocation::default();
    Greedy::new(&classes).allocate(&jobs, 10.0, &mut out);
    assert!((out.cores[0] - 2.10820593613312).abs() < 1e-7);
    assert!((out.cores[1] - 7.89179406386688).abs() < 1e-7);
}
