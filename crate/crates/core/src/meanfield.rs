//! Fluid model of WHAM in the mean-field limit.
//!
//! State `z[i][u]` is the number of class-`i` jobs in phase `u` per unit of
//! system scale. All jobs of a class share the width `g_i(ell)`, where the
//! price `ell` clears `sum_i |z_i| g_i(ell) = n`, and phase-`u` mass leaves
//! through the sub-generator at speed `s_i(g_i)`:
//!
//! ```text
//! dz_i/dt = lambda_i p_i + z_i Q_i s_i(g_i(ell(z)))
//! ```

use thiserror::Error;

use crate::policies::clear_market;
use crate::roots;
use crate::speedup::{SpeedupError, SpeedupFunction};
use crate::workload::{PhaseTypeDist, WorkloadSpec};

/// Endpoint movement below which step halving stops.
pub const STEP_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FluidError {
    #[error("class {0} has a non-phase-type size distribution; the fluid model needs phases")]
    NotPhaseType(usize),
    #[error("state shape does not match the workload")]
    Shape,
    #[error("workload load {load} is not below {n} cores")]
    Infeasible { load: f64, n: f64 },
    #[error("step {0} must be positive and finite")]
    Step(f64),
    #[error(transparent)]
    Speedup(#[from] SpeedupError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidClass {
    pub rate: f64,
    pub holding_cost: f64,
    pub speedup: SpeedupFunction,
    pub size: PhaseTypeDist,
    f_one: f64,
}

impl FluidClass {
    pub fn new(rate: f64, holding_cost: f64, speedup: SpeedupFunction, size: PhaseTypeDist) -> Result<Self, FluidError> {
        let f_one = speedup.f_at_one()?;
        Ok(FluidClass { rate, holding_cost, speedup, size, f_one })
    }

    fn g(&self, price: f64) -> f64 {
        if price / self.holding_cost >= self.f_one {
            1.0
        } else {
            self.speedup.g(self.holding_cost, price).unwrap_or(1.0)
        }
    }
}

/// Fluid classes of `w` with arrival rates multiplied by `d`.
pub fn fluid_classes(w: &WorkloadSpec, d: f64) -> Result<Vec<FluidClass>, FluidError> {
    w.classes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let ph = c.size.phase_type().ok_or(FluidError::NotPhaseType(i))?;
            FluidClass::new(c.rate() * d, c.holding_cost, c.speedup.clone(), ph.clone())
        })
        .collect()
}

/// Per-class, per-phase fluid mass.
pub type FluidState = Vec<Vec<f64>>;

pub fn zero_state(classes: &[FluidClass]) -> FluidState {
    classes.iter().map(|c| vec![0.0; c.size.phases()]).collect()
}

fn check_shape(z: &FluidState, classes: &[FluidClass]) -> Result<(), FluidError> {
    if z.len() != classes.len() || z.iter().zip(classes).any(|(zi, c)| zi.len() != c.size.phases()) {
        return Err(FluidError::Shape);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidPrice {
    pub price: f64,
    /// Width per class at `price`.
    pub widths: Vec<f64>,
    /// No fluid mass: every class would sit at one core.
    pub idle: bool,
    /// More mass than cores; every width is capped at one core.
    pub overloaded: bool,
    /// Demand stayed below `n` down to the price floor.
    pub saturated: bool,
}

fn top_price(classes: &[FluidClass]) -> f64 {
    classes.iter().map(|c| c.holding_cost * c.f_one).fold(0.0, f64::max)
}

/// Market-clearing price of the fluid state.
pub fn fluid_price(z: &FluidState, classes: &[FluidClass], n: f64) -> Result<FluidPrice, FluidError> {
    check_shape(z, classes)?;
    let totals: Vec<f64> = z.iter().map(|zi| zi.iter().sum()).collect();
    let mass: f64 = totals.iter().sum();
    let top = top_price(classes);
    let flat = |flag_idle: bool, flag_over: bool| FluidPrice {
        price: top,
        widths: vec![1.0; classes.len()],
        idle: flag_idle,
        overloaded: flag_over,
        saturated: false,
    };
    if mass <= 0.0 {
        return Ok(flat(true, false));
    }
    if mass > n {
        return Ok(flat(false, true));
    }
    let (price, widths, saturated) = clear_market(&totals, n, top, |i, p| classes[i].g(p));
    Ok(FluidPrice { price, widths, idle: false, overloaded: false, saturated })
}

/// Drift of the fluid state.
pub fn fluid_rhs(z: &FluidState, classes: &[FluidClass], n: f64) -> Result<FluidState, FluidError> {
    let price = fluid_price(z, classes, n)?;
    Ok(drift(z, classes, &price.widths))
}

fn drift(z: &FluidState, classes: &[FluidClass], widths: &[f64]) -> FluidState {
    classes
        .iter()
        .zip(z)
        .zip(widths)
        .map(|((c, zi), &g)| {
            let speed = c.speedup.value(g);
            let q = c.size.generator();
            (0..zi.len())
                .map(|u| {
                    let flow: f64 = (0..zi.len()).map(|v| zi[v] * q[v][u]).sum();
                    c.rate * c.size.initial()[u] + flow * speed
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stationary {
    pub z: FluidState,
    pub price: f64,
    pub widths: Vec<f64>,
    /// `(1 / lambda) sum_i c_i |z_i|`, the holding cost implied by Little's law.
    pub cost: f64,
}

impl Stationary {
    pub fn class_totals(&self) -> Vec<f64> {
        self.z.iter().map(|zi| zi.iter().sum()).collect()
    }
}

/// Fixed point of the fluid ODE.
///
/// The price solves `sum_i lambda_i E[X_i] g_i / s_i(g_i) = n`; given the
/// widths, each class's phase profile is its expected occupancy scaled by
/// `lambda_i / s_i(g_i)`.
pub fn fluid_stationary(classes: &[FluidClass], n: f64) -> Result<Stationary, FluidError> {
    let load: f64 = classes.iter().map(|c| c.rate * c.size.mean()).sum();
    if !(load < n) {
        return Err(FluidError::Infeasible { load, n });
    }
    let used = |price: f64| -> f64 {
        classes
            .iter()
            .map(|c| {
                let g = c.g(price);
                c.rate * c.size.mean() * g / c.speedup.value(g)
            })
            .sum()
    };
    let top = top_price(classes);
    let mut lo = top / 2.0;
    let mut hi = top;
    while used(lo) < n && lo > 1e-300 {
        hi = lo;
        lo /= 2.0;
    }
    let (_, price) = roots::bisect_log(lo, hi, 1e-15, 400, |p| used(p) <= n);
    let widths: Vec<f64> = classes.iter().map(|c| c.g(price)).collect();
    let z: FluidState = classes
        .iter()
        .zip(&widths)
        .map(|(c, &g)| {
            let scale = c.rate / c.speedup.value(g);
            c.size.occupancy().iter().map(|o| scale * o).collect()
        })
        .collect();
    let rate: f64 = classes.iter().map(|c| c.rate).sum();
    let cost = classes
        .iter()
        .zip(&z)
        .map(|(c, zi)| c.holding_cost * zi.iter().sum::<f64>())
        .sum::<f64>()
        / rate;
    Ok(Stationary { z, price, widths, cost })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FluidState>,
    /// Integration step finally used.
    pub step: f64,
    /// Some component went negative and was clamped to zero.
    pub clamped: bool,
    /// Some visited state had more mass than cores.
    pub overloaded: bool,
}

impl Trajectory {
    pub fn last(&self) -> &FluidState {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

fn axpy(z: &FluidState, h: f64, k: &FluidState) -> FluidState {
    z.iter().zip(k).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + h * y).collect()).collect()
}

struct Flags {
    clamped: bool,
    overloaded: bool,
}

fn rhs_flagged(z: &FluidState, classes: &[FluidClass], n: f64, flags: &mut Flags) -> Result<FluidState, FluidError> {
    let p = fluid_price(z, classes, n)?;
    flags.overloaded |= p.overloaded;
    Ok(drift(z, classes, &p.widths))
}

fn integrate_fixed(
    z0: &FluidState,
    classes: &[FluidClass],
    n: f64,
    t_end: f64,
    h: f64,
    sample_dt: f64,
) -> Result<(Vec<f64>, Vec<FluidState>, Flags), FluidError> {
    let steps = (t_end / h).round() as usize;
    let every = ((sample_dt / h).round() as usize).max(1);
    let mut flags = Flags { clamped: false, overloaded: false };
    let mut z = z0.clone();
    let mut times = vec![0.0];
    let mut states = vec![z.clone()];
    for s in 1..=steps {
        let k1 = rhs_flagged(&z, classes, n, &mut flags)?;
        let k2 = rhs_flagged(&axpy(&z, h / 2.0, &k1), classes, n, &mut flags)?;
        let k3 = rhs_flagged(&axpy(&z, h / 2.0, &k2), classes, n, &mut flags)?;
        let k4 = rhs_flagged(&axpy(&z, h, &k3), classes, n, &mut flags)?;
        for i in 0..z.len() {
            for u in 0..z[i].len() {
                let v = z[i][u] + h / 6.0 * (k1[i][u] + 2.0 * k2[i][u] + 2.0 * k3[i][u] + k4[i][u]);
                if v < 0.0 {
                    flags.clamped = true;
                }
                z[i][u] = v.max(0.0);
            }
        }
        if s % every == 0 || s == steps {
            times.push(s as f64 * h);
            states.push(z.clone());
        }
    }
    Ok((times, states, flags))
}

fn max_gap(a: &FluidState, b: &FluidState) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Classical RK4 from `z0` to `t_end`, halving `step` until the endpoint
/// moves by less than [`STEP_TOL`]; the state is recorded every `sample_dt`.
pub fn fluid_integrate(
    z0: &FluidState,
    classes: &[FluidClass],
    n: f64,
    t_end: f64,
    step: f64,
    sample_dt: f64,
) -> Result<Trajectory, FluidError> {
    check_shape(z0, classes)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(FluidError::Step(step));
    }
    let mut h = step.min(t_end.max(f64::MIN_POSITIVE));
    let mut coarse = integrate_fixed(z0, classes, n, t_end, h, sample_dt)?;
    for _ in 0..MAX_HALVINGS {
        let fine = integrate_fixed(z0, classes, n, t_end, h / 2.0, sample_dt)?;
        let moved = max_gap(coarse.1.last().unwrap(), fine.1.last().unwrap());
        h /= 2.0;
        coarse = fine;
        if moved < STEP_TOL {
            break;
        }
    }
    let (times, states, flags) = coarse;
    Ok(Trajectory { times, states, step: h, clamped: flags.clamped, overloaded: flags.overloaded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relaxopt::value_lower_bound;
    use crate::workload::{ArrivalProcess, JobClass, SizeDist};
    use proptest::prelude::*;

    fn fc(rate: f64, c: f64, s: SpeedupFunction, size: PhaseTypeDist) -> FluidClass {
        FluidClass::new(rate, c, s, size).unwrap()
    }

    fn single() -> Vec<FluidClass> {
        vec![fc(1.0, 1.0, SpeedupFunction::power(0.5).unwrap(), PhaseTypeDist::exponential(1.0).unwrap())]
    }

    fn coxian() -> PhaseTypeDist {
        PhaseTypeDist::new(
            vec![1.0, 0.0, 0.0],
            vec![vec![-2.0, 1.5, 0.0], vec![0.0, -3.0, 2.0], vec![0.0, 0.0, -4.0]],
        )
        .unwrap()
    }

    #[test]
    fn single_class_price_and_stationary_point() {
        let cls = single();
        let p = fluid_price(&vec![vec![0.25]], &cls, 4.0).unwrap();
        assert!((p.price - 0.0625).abs() < 1e-12);
        assert!((p.widths[0] - 16.0).abs() < 1e-9);
        let st = fluid_stationary(&cls, 4.0).unwrap();
        assert!((st.widths[0] - 16.0).abs() < 1e-9);
        assert!((st.z[0][0] - 0.25).abs() < 1e-12);
        assert!((st.price - 0.0625).abs() < 1e-12);
        assert!((st.cost - 0.25).abs() < 1e-12);
        let r = fluid_rhs(&st.z, &cls, 4.0).unwrap();
        assert!(r[0][0].abs() < 1e-10);
    }

    #[test]
    fn empty_state_drifts_at_arrival_rate() {
        let cls = vec![
            fc(1.5, 1.0, SpeedupFunction::power(0.5).unwrap(), coxian()),
            fc(0.5, 2.0, SpeedupFunction::amdahl(0.3).unwrap(), PhaseTypeDist::exponential(2.0).unwrap()),
        ];
        let z = zero_state(&cls);
        assert!(fluid_price(&z, &cls, 4.0).unwrap().idle);
        let r = fluid_rhs(&z, &cls, 4.0).unwrap();
        assert_eq!(r, vec![vec![1.5, 0.0, 0.0], vec![0.5]]);
    }

    #[test]
    fn saturation_boundary_and_symmetry() {
        let cls = vec![
            fc(1.0, 1.0, SpeedupFunction::power(0.5).unwrap(), PhaseTypeDist::exponential(1.0).unwrap()),
            fc(1.0, 1.0, SpeedupFunction::power(0.5).unwrap(), PhaseTypeDist::exponential(1.0).unwrap()),
        ];
        // total mass equal to n: every class at one core, price at max c f(1) = 1
        let p = fluid_price(&vec![vec![2.0], vec![2.0]], &cls, 4.0).unwrap();
        assert!((p.price - 1.0).abs() < 1e-9);
        assert!(p.widths.iter().all(|&g| (g - 1.0).abs() < 1e-9));
        let p = fluid_price(&vec![vec![0.3], vec![0.3]], &cls, 4.0).unwrap();
        assert_eq!(p.widths[0], p.widths[1]);
        let p = fluid_price(&vec![vec![3.0], vec![3.0]], &cls, 4.0).unwrap();
        assert!(p.overloaded);
    }

    #[test]
    fn phase_type_with_one_phase_matches_exponential() {
        let a = single();
        let b = vec![fc(
            1.0,
            1.0,
            SpeedupFunction::power(0.5).unwrap(),
            PhaseTypeDist::new(vec![1.0], vec![vec![-1.0]]).unwrap(),
        )];
        assert_eq!(fluid_stationary(&a, 4.0).unwrap(), fluid_stationary(&b, 4.0).unwrap());
    }

    #[test]
    fn stationary_point_of_three_phase_class() {
        let cls = vec![
            fc(1.0, 1.0, SpeedupFunction::power(0.4).unwrap(), coxian()),
            fc(2.0, 3.0, SpeedupFunction::amdahl(0.1).unwrap(), PhaseTypeDist::hyperexp(&[0.3, 0.7], &[1.0, 4.0]).unwrap()),
        ];
        let n = 6.0;
        let st = fluid_stationary(&cls, n).unwrap();
        let r = fluid_rhs(&st.z, &cls, n).unwrap();
        assert!(r.iter().flatten().all(|v| v.abs() < 1e-10), "{r:?}");
        for (c, (zi, &g)) in cls.iter().zip(st.z.iter().zip(&st.widths)) {
            let total: f64 = zi.iter().sum();
            assert!((total - c.rate * c.size.mean() / c.speedup.value(g)).abs() < 1e-10);
        }
        let traj = fluid_integrate(&st.z, &cls, n, 100.0, 0.05, 10.0).unwrap();
        assert!(max_gap(traj.last(), &st.z) < 1e-6);
    }

    #[test]
    fn rhs_is_scale_equivariant() {
        let cls = vec![
            fc(1.0, 1.0, SpeedupFunction::power(0.4).unwrap(), coxian()),
            fc(2.0, 3.0, SpeedupFunction::amdahl(0.1).unwrap(), PhaseTypeDist::exponential(2.0).unwrap()),
        ];
        let doubled: Vec<FluidClass> = cls.iter().map(|c| FluidClass { rate: 2.0 * c.rate, ..c.clone() }).collect();
        let z = vec![vec![0.3, 0.2, 0.1], vec![0.4]];
        let z2: FluidState = z.iter().map(|zi| zi.iter().map(|v| 2.0 * v).collect()).collect();
        let a = fluid_rhs(&z, &cls, 5.0).unwrap();
        let b = fluid_rhs(&z2, &doubled, 10.0).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((2.0 * x - y).abs() < 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn stationary_cost_equals_lower_bound() {
        let w = WorkloadSpec::new(
            vec![
                JobClass::new(
                    ArrivalProcess::Poisson { rate: 1.0 },
                    SizeDist::PhaseType(coxian()),
                    1.0,
                    SpeedupFunction::power(0.4).unwrap(),
                ),
                JobClass::new(
                    ArrivalProcess::Poisson { rate: 2.0 },
                    SizeDist::PhaseType(PhaseTypeDist::exponential(2.0).unwrap()),
                    3.0,
                    SpeedupFunction::amdahl(0.1).unwrap(),
                ),
            ],
            3.0,
        )
        .unwrap();
        let st = fluid_stationary(&fluid_classes(&w, 1.0).unwrap(), w.n).unwrap();
        let v = value_lower_bound(&w).unwrap();
        assert!((st.cost / v - 1.0).abs() < 1e-6, "{} vs {v}", st.cost);
    }

    #[test]
    fn integration_from_empty_converges() {
        let cls = single();
        let st = fluid_stationary(&cls, 4.0).unwrap();
        let traj = fluid_integrate(&zero_state(&cls), &cls, 4.0, 60.0, 0.1, 1.0).unwrap();
        assert!(max_gap(traj.last(), &st.z) < 1e-6);
        assert_eq!(traj.times.len(), 61);
        assert!(!traj.overloaded);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn price_clears_the_market(z1 in 0.0f64..2.0, z2 in 0.0f64..2.0, z3 in 0.01f64..2.0) {
            let cls = vec![
                fc(1.0, 1.0, SpeedupFunction::power(0.3).unwrap(), PhaseTypeDist::exponential(5.0).unwrap()),
                fc(2.0, 2.0, SpeedupFunction::power(0.5).unwrap(), PhaseTypeDist::hyperexp(&[0.5, 0.5], &[1.0, 9.0]).unwrap()),
                fc(5.0 / 3.0, 1.0, SpeedupFunction::amdahl(0.2).unwrap(), PhaseTypeDist::exponential(3.0).unwrap()),
            ];
            let z = vec![vec![z1], vec![z2 / 2.0, z2 / 2.0], vec![z3]];
            let p = fluid_price(&z, &cls, 7.0).unwrap();
            prop_assume!(!p.overloaded);
            let used = z1 * p.widths[0] + z2 * p.widths[1] + z3 * p.widths[2];
            prop_assert!((used - 7.0).abs() < 1e-7, "{used}");
        }
    }
}
