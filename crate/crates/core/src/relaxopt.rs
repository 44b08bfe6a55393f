//! Fixed-width allocations for the relaxed problem and the lower bound `V*`.
//!
//! The relaxed problem only caps the *time-average* number of busy cores:
//!
//! ```text
//! minimize   (1/lambda) sum_i c_i lambda_i E[X_i] / s_i(k_i)
//! subject to sum_i lambda_i E[X_i] k_i / s_i(k_i) <= n,   k_i >= 1
//! ```
//!
//! Its KKT conditions give `k_i = g_i(ell*)` where the price `ell*` clears
//! the constraint, so the solver is a scalar bisection on the demand map
//! `D(ell) = sum_i lambda_i E[X_i] g_i(ell) / s_i(g_i(ell))`.

use thiserror::Error;

use crate::roots;
use crate::speedup::{SpeedupError, SpeedupFunction};
use crate::workload::WorkloadSpec;

/// Price floor for the bracket search.
pub const PRICE_FLOOR: f64 = 1e-12;
/// Prices above this are reported as badly conditioned.
pub const PRICE_WARN: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelaxError {
    #[error("offered load {load} exceeds the {n} available cores")]
    Overloaded { load: f64, n: f64 },
    #[error("invalid relaxed-problem input: {0}")]
    Invalid(String),
    #[error("grid oracle supports at most 3 classes, got {0}")]
    TooManyClasses(usize),
    #[error(transparent)]
    Speedup(#[from] SpeedupError),
}

/// Per-class inputs: arrival rate, mean size, holding cost and speedup.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxClass {
    pub rate: f64,
    pub mean_size: f64,
    pub holding_cost: f64,
    pub speedup: SpeedupFunction,
}

impl RelaxClass {
    pub fn new(rate: f64, mean_size: f64, holding_cost: f64, speedup: SpeedupFunction) -> Self {
        RelaxClass { rate, mean_size, holding_cost, speedup }
    }

    fn offered(&self) -> f64 {
        self.rate * self.mean_size
    }

    /// Effective load `lambda E[X] k / s(k)` at width `k`.
    pub fn effective_load(&self, k: f64) -> f64 {
        self.offered() * k / self.speedup.value(k)
    }
}

/// Classes of a workload at scale `d` (rates multiplied by `d`).
pub fn relax_classes(w: &WorkloadSpec, d: f64) -> Vec<RelaxClass> {
    w.classes
        .iter()
        .map(|c| RelaxClass::new(c.rate() * d, c.mean_size(), c.holding_cost, c.speedup.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxSolution {
    /// `k*_i` per class.
    pub allocations: Vec<f64>,
    /// Market-clearing price `ell*`.
    pub price: f64,
    /// Normalized cost `V*`.
    pub value: f64,
    /// `r_i = lambda_i E[X_i] k_i / s_i(k_i)`.
    pub effective_loads: Vec<f64>,
    /// Demand could not reach `n` at any price; the constraint is slack.
    pub saturated: bool,
    pub warnings: Vec<String>,
}

impl RelaxSolution {
    pub fn total_effective_load(&self) -> f64 {
        self.effective_loads.iter().sum()
    }

    fn assemble(classes: &[RelaxClass], allocations: Vec<f64>, price: f64, saturated: bool) -> Self {
        let total_rate: f64 = classes.iter().map(|c| c.rate).sum();
        let value = classes
            .iter()
            .zip(&allocations)
            .map(|(c, &k)| c.holding_cost * c.offered() / c.speedup.value(k))
            .sum::<f64>()
            / total_rate;
        let effective_loads = classes.iter().zip(&allocations).map(|(c, &k)| c.effective_load(k)).collect();
        let mut warnings = Vec::new();
        if price > PRICE_WARN {
            let msg = format!("clearing price {price:e} exceeds {PRICE_WARN:e}; allocations are ill-conditioned");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        RelaxSolution { allocations, price, value, effective_loads, saturated, warnings }
    }
}

fn validate(classes: &[RelaxClass], n: f64) -> Result<(), RelaxError> {
    if classes.is_empty() {
        return Err(RelaxError::Invalid("no classes".into()));
    }
    if !(n > 0.0) || !n.is_finite() {
        return Err(RelaxError::Invalid(format!("core count {n} must be positive")));
    }
    for (i, c) in classes.iter().enumerate() {
        if !(c.rate > 0.0 && c.mean_size > 0.0 && c.holding_cost > 0.0)
            || !(c.rate.is_finite() && c.mean_size.is_finite() && c.holding_cost.is_finite())
        {
            return Err(RelaxError::Invalid(format!("class {i} needs positive finite rate, size and cost")));
        }
    }
    let load: f64 = classes.iter().map(RelaxClass::offered).sum();
    if load > n * (1.0 + 1e-12) {
        return Err(RelaxError::Overloaded { load, n });
    }
    Ok(())
}

fn widths(classes: &[RelaxClass], ell: f64) -> Result<Vec<f64>, SpeedupError> {
    classes.iter().map(|c| c.speedup.g(c.holding_cost, ell)).collect()
}

fn load_of(classes: &[RelaxClass], ks: &[f64]) -> f64 {
    classes.iter().zip(ks).map(|(c, &k)| c.effective_load(k)).sum()
}

/// Demand map `D(ell)`: time-average cores used when each class runs at `g_i(ell)`.
pub fn demand(classes: &[RelaxClass], ell: f64) -> Result<f64, RelaxError> {
    Ok(load_of(classes, &widths(classes, ell)?))
}

/// Highest price anyone responds to: `max_i c_i f_i(1)`.
pub fn saturation_price(classes: &[RelaxClass]) -> Result<f64, RelaxError> {
    let mut best: f64 = 0.0;
    for c in classes {
        best = best.max(c.holding_cost * c.speedup.f_at_one()?);
    }
    Ok(best)
}

/// Solves the relaxed problem by bisection on the clearing price.
pub fn solve_relaxed(classes: &[RelaxClass], n: f64) -> Result<RelaxSolution, RelaxError> {
    validate(classes, n)?;
    let top = saturation_price(classes)?;
    let base: f64 = classes.iter().map(RelaxClass::offered).sum();
    if base >= n * (1.0 - 1e-12) {
        // no room above one core per job
        return Ok(RelaxSolution::assemble(classes, vec![1.0; classes.len()], top, false));
    }

    let mut hi = top;
    let mut lo = top / 2.0;
    while demand(classes, lo)? < n {
        hi = lo;
        lo /= 2.0;
        if lo < PRICE_FLOOR {
            let ks = widths(classes, PRICE_FLOOR)?;
            return Ok(RelaxSolution::assemble(classes, ks, PRICE_FLOOR, true));
        }
    }
    let mut failure = None;
    let (lo, hi) = roots::bisect_log(lo, hi, 1e-15, 400, |ell| match demand(classes, ell) {
        Ok(v) => v <= n,
        Err(e) => {
            failure.get_or_insert(e);
            true
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    // D may jump across n at ell* (piecewise-linear speedups); any width on
    // the jump is KKT-optimal, so interpolate until the constraint is tight.
    let k_hi = widths(classes, hi)?;
    let k_lo = widths(classes, lo)?;
    let at = |t: f64| -> Vec<f64> { k_hi.iter().zip(&k_lo).map(|(a, b)| a + t * (b - a)).collect() };
    let (t, _) = roots::bisect(0.0, 1.0, 1e-15, 200, |t| load_of(classes, &at(t)) > n);
    Ok(RelaxSolution::assemble(classes, at(t), hi, false))
}

/// `V*(lambda_i, n)` for a workload. Independent of the scale.
pub fn value_lower_bound(w: &WorkloadSpec) -> Result<f64, RelaxError> {
    Ok(solve_relaxed(&relax_classes(w, 1.0), w.n)?.value)
}

/// Smallest width whose effective load reaches `budget`, by doubling and bisection.
fn width_for_load(c: &RelaxClass, budget: f64) -> f64 {
    if c.effective_load(1.0) >= budget {
        return 1.0;
    }
    let mut hi = 2.0;
    while c.effective_load(hi) < budget {
        hi *= 2.0;
        if hi > 1e15 {
            return hi;
        }
    }
    roots::bisect(1.0, hi, 1e-15, 200, |k| c.effective_load(k) >= budget).0
}

/// Brute-force oracle: searches widths directly on the constraint surface.
///
/// The first `m - 1` widths are scanned on a grid uniform in `ln k` with
/// spacing `grid_step`, the last width is solved from the constraint, and
/// the best cell is then refined by repeatedly shrinking a local grid. Only
/// `s(k)` is evaluated, never `f` or `g`.
pub fn solve_relaxed_grid_oracle(
    classes: &[RelaxClass],
    n: f64,
    grid_step: f64,
) -> Result<RelaxSolution, RelaxError> {
    let m = classes.len();
    if m > 3 {
        return Err(RelaxError::TooManyClasses(m));
    }
    validate(classes, n)?;
    if !(grid_step > 0.0) {
        return Err(RelaxError::Invalid("grid step must be positive".into()));
    }
    let total_rate: f64 = classes.iter().map(|c| c.rate).sum();
    let base: f64 = classes.iter().map(RelaxClass::offered).sum();
    let objective = |ks: &[f64]| -> f64 {
        classes.iter().zip(ks).map(|(c, &k)| c.holding_cost * c.offered() / c.speedup.value(k)).sum::<f64>()
            / total_rate
    };
    let (free, last) = classes.split_at(m - 1);
    let last = &last[0];
    // complete a point on the surface, None if infeasible
    let complete = |head: &[f64]| -> Option<Vec<f64>> {
        let used: f64 = free.iter().zip(head).map(|(c, &k)| c.effective_load(k)).sum();
        let budget = n - used;
        if budget < last.offered() {
            return None;
        }
        let mut ks = head.to_vec();
        ks.push(width_for_load(last, budget));
        Some(ks)
    };
    let upper: Vec<f64> = free
        .iter()
        .map(|c| width_for_load(c, n - (base - c.offered())))
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let consider = |head: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
        if let Some(ks) = complete(head) {
            let v = objective(&ks);
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                *best = Some((v, ks));
            }
        }
    };
    let axis = |hi: f64| -> Vec<f64> {
        let steps = (hi.ln() / grid_step).ceil() as usize;
        (0..=steps).map(|j| (j as f64 * grid_step).exp().min(hi)).collect()
    };
    match free.len() {
        0 => consider(&[], &mut best),
        1 => {
            for a in axis(upper[0]) {
                consider(&[a], &mut best);
            }
        }
        _ => {
            let ax1 = axis(upper[1]);
            for a in axis(upper[0]) {
                for &b in &ax1 {
                    consider(&[a, b], &mut best);
                }
            }
        }
    }
    let (_, mut ks) = best.ok_or_else(|| RelaxError::Invalid("no feasible grid point".into()))?;

    // local refinement in ln k
    let mut radius = grid_step;
    const POINTS: i32 = 10;
    while radius > 1e-13 && !free.is_empty() {
        let centre: Vec<f64> = ks[..m - 1].iter().map(|k| k.ln()).collect();
        let mut local: Option<(f64, Vec<f64>)> = None;
        let coord = |i: usize, j: i32| -> f64 {
            (centre[i] + radius * j as f64 / POINTS as f64).exp().clamp(1.0, upper[i])
        };
        if free.len() == 1 {
            for j in -POINTS..=POINTS {
                consider(&[coord(0, j)], &mut local);
            }
        } else {
            for j in -POINTS..=POINTS {
                for l in -POINTS..=POINTS {
                    consider(&[coord(0, j), coord(1, l)], &mut local);
                }
            }
        }
        if let Some((_, k2)) = local {
            ks = k2;
        }
        radius *= 0.5;
    }
    let loads: Vec<f64> = classes.iter().zip(&ks).map(|(c, &k)| c.effective_load(k)).collect();
    let total_load: f64 = loads.iter().sum();
    let mut sol = RelaxSolution::assemble(classes, ks, f64::NAN, false);
    sol.saturated = total_load < n * (1.0 - 1e-9) && sol.allocations.iter().any(|&k| k > 1.0);
    Ok(sol)
}
