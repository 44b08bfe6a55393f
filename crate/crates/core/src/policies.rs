//! Core-allocation policies.
//!
//! A policy sees the live jobs (oldest first) and the core count and fills an
//! [`Allocation`]: one entry per job, each either `0` or at least one core,
//! summing to at most `n`. Every policy here is a function of the live set
//! only, so allocations stay constant between arrivals and departures.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relaxopt::{relax_classes, solve_relaxed, RelaxError};
use crate::roots;
use crate::speedup::{SpeedupError, SpeedupFunction};
use crate::workload::{JobClass, WorkloadSpec};

/// Lowest price tried before a market is declared saturated.
const PRICE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("class {0} has a speedup function that is not strictly concave; WHAM needs s'' < 0")]
    NotStrictlyConcave(usize),
    #[error("beta {0} must lie in (0.75, 1)")]
    Beta(f64),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Speedup(#[from] SpeedupError),
    #[error("unknown policy {0:?}")]
    Unknown(String),
}

/// What a policy needs to know about a live job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobView {
    pub id: u64,
    pub class: usize,
    pub arrival: f64,
    pub remaining: f64,
}

/// Cores per live job, aligned with the job slice handed to the policy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Allocation {
    pub cores: Vec<f64>,
    /// WHAM ran in its overload mode (more jobs than cores).
    pub overload_mode: bool,
    /// Demand could not absorb all cores; some are left idle on purpose.
    pub saturated: bool,
}

impl Allocation {
    pub fn total(&self) -> f64 {
        self.cores.iter().sum()
    }

    fn reset(&mut self, len: usize) {
        self.cores.clear();
        self.cores.resize(len, 0.0);
        self.overload_mode = false;
        self.saturated = false;
    }

    /// Capacity and floor check: sum within `n + 1e-9`, no entry in `(0, 1)`.
    pub fn is_valid(&self, n: f64) -> bool {
        self.total() <= n + 1e-9 && self.cores.iter().all(|&k| k == 0.0 || k >= 1.0 - 1e-12)
    }
}

pub trait Policy: Send {
    fn name(&self) -> &'static str;

    /// Fills `out` for `jobs`, which must be ordered by arrival time.
    fn allocate(&mut self, jobs: &[JobView], n: f64, out: &mut Allocation);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Fwcam,
    Wham,
    Equi,
    Greedy,
    Fcfs1,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] =
        [PolicyKind::Fwcam, PolicyKind::Wham, PolicyKind::Equi, PolicyKind::Greedy, PolicyKind::Fcfs1];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Fwcam => "fwcam",
            PolicyKind::Wham => "wham",
            PolicyKind::Equi => "equi",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Fcfs1 => "fcfs1",
        }
    }

    /// Instantiates the policy for `w` scaled by `d`.
    pub fn build(self, w: &WorkloadSpec, d: f64, beta: f64) -> Result<Box<dyn Policy>, PolicyError> {
        Ok(match self {
            PolicyKind::Fwcam => Box::new(FwCam::new(FwCamPlan::new(w, d, beta)?)),
            PolicyKind::Wham => Box::new(Wham::new(&w.classes)?),
            PolicyKind::Equi => Box::new(Equi),
            PolicyKind::Greedy => Box::new(Greedy::new(&w.classes)),
            PolicyKind::Fcfs1 => Box::new(Fcfs1),
        })
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PolicyError::Unknown(s.to_string()))
    }
}

/// Whole cores available for one-core-per-job service.
fn slots(n: f64) -> usize {
    (n + 1e-9).floor().max(0.0) as usize
}

/// Oldest `floor(n)` jobs get one core each.
fn oldest_first(n: f64, out: &mut Allocation) {
    for k in out.cores.iter_mut().take(slots(n)) {
        *k = 1.0;
    }
}

fn class_counts(jobs: &[JobView], m: usize) -> Vec<f64> {
    let mut counts = vec![0.0; m];
    for j in jobs {
        counts[j.class] += 1.0;
    }
    counts
}

/// Per-class widths clearing `sum_i count_i width_i(price) = n`.
///
/// `width` is nonincreasing in the price and returns one core at or above
/// `top`. The price is bracketed by halving from `top`, located by log
/// bisection, and any remaining gap (a jump in `width`) is closed by linear
/// interpolation between the two bracket ends.
pub(crate) fn clear_market<F>(counts: &[f64], n: f64, top: f64, width: F) -> (f64, Vec<f64>, bool)
where
    F: Fn(usize, f64) -> f64,
{
    let demand_at = |price: f64| -> (f64, Vec<f64>) {
        let ws: Vec<f64> = (0..counts.len()).map(|i| if counts[i] > 0.0 { width(i, price) } else { 1.0 }).collect();
        (counts.iter().zip(&ws).map(|(c, w)| c * w).sum(), ws)
    };
    let mut hi = top;
    let mut lo = top / 2.0;
    while demand_at(lo).0 < n {
        hi = lo;
        lo /= 2.0;
        if lo < PRICE_FLOOR {
            let (_, ws) = demand_at(PRICE_FLOOR);
            return (PRICE_FLOOR, ws, true);
        }
    }
    let (lo, hi) = roots::bisect_log(lo, hi, 1e-14, 300, |p| demand_at(p).0 <= n);
    let (d_hi, w_hi) = demand_at(hi);
    let (d_lo, w_lo) = demand_at(lo);
    let t = if d_lo > d_hi { ((n - d_hi) / (d_lo - d_hi)).clamp(0.0, 1.0) } else { 0.0 };
    let ws: Vec<f64> = w_hi.iter().zip(&w_lo).map(|(a, b)| a + t * (b - a)).collect();
    // guard rounding so the total never exceeds n
    let total: f64 = counts.iter().zip(&ws).map(|(c, w)| c * w).sum();
    let ws = if total > n { w_hi } else { ws };
    (hi, ws, false)
}

/// Whittle allocation for malleable jobs.
///
/// With more jobs than cores, the `floor(n)` jobs with the largest
/// `c / remaining size` run on one core each (ties: earlier arrival, then
/// lower id). Otherwise every class-`i` job gets `g_i(ell*)` cores at the
/// smallest price `ell*` for which total demand fits in `n`.
#[derive(Debug, Clone)]
pub struct Wham {
    classes: Vec<(f64, SpeedupFunction)>,
    top: f64,
    order: Vec<usize>,
    last_price: f64,
}

impl Wham {
    pub fn new(classes: &[JobClass]) -> Result<Self, PolicyError> {
        let mut top: f64 = 0.0;
        for (i, c) in classes.iter().enumerate() {
            if !c.speedup.is_strictly_concave() {
                return Err(PolicyError::NotStrictlyConcave(i));
            }
            top = top.max(c.holding_cost * c.speedup.f_at_one()?);
        }
        Ok(Wham {
            classes: classes.iter().map(|c| (c.holding_cost, c.speedup.clone())).collect(),
            top,
            order: Vec::new(),
            last_price: f64::NAN,
        })
    }

    /// Price chosen by the last underload-mode allocation.
    pub fn last_price(&self) -> f64 {
        self.last_price
    }

    fn g(&self, class: usize, price: f64) -> f64 {
        let (c, s) = &self.classes[class];
        // price > 0 and the family is strictly concave, so g cannot fail
        s.g(*c, price).unwrap_or(1.0)
    }
}

impl Policy for Wham {
    fn name(&self) -> &'static str {
        "wham"
    }

    fn allocate(&mut self, jobs: &[JobView], n: f64, out: &mut Allocation) {
        out.reset(jobs.len());
        if jobs.is_empty() {
            return;
        }
        if jobs.len() as f64 > n {
            out.overload_mode = true;
            let take = slots(n);
            self.order.clear();
            self.order.extend(0..jobs.len());
            let key = |j: &JobView| self.classes[j.class].0 / j.remaining;
            let cmp = |a: &usize, b: &usize| {
                let (ja, jb) = (&jobs[*a], &jobs[*b]);
                key(jb)
                    .partial_cmp(&key(ja))
                    .unwrap_or(Ordering::Equal)
                    .then(ja.arrival.partial_cmp(&jb.arrival).unwrap_or(Ordering::Equal))
                    .then(ja.id.cmp(&jb.id))
            };
            if take > 0 && take < jobs.len() {
                self.order.select_nth_unstable_by(take - 1, cmp);
            }
            for &i in self.order.iter().take(take) {
                out.cores[i] = 1.0;
            }
            return;
        }
        let counts = class_counts(jobs, self.classes.len());
        let (price, widths, saturated) = clear_market(&counts, n, self.top, |i, p| self.g(i, p));
        self.last_price = price;
        out.saturated = saturated;
        for (k, j) in out.cores.iter_mut().zip(jobs) {
            *k = widths[j.class];
        }
    }
}

/// Equal split of the cores among live jobs; oldest-first single cores in overload.
#[derive(Debug, Clone, Copy, Default)]
pub struct Equi;

impl Policy for Equi {
    fn name(&self) -> &'static str {
        "equi"
    }

    fn allocate(&mut self, jobs: &[JobView], n: f64, out: &mut Allocation) {
        out.reset(jobs.len());
        if jobs.is_empty() {
            return;
        }
        if jobs.len() as f64 > n {
            oldest_first(n, out);
        } else {
            let share = n / jobs.len() as f64;
            out.cores.iter_mut().for_each(|k| *k = share);
        }
    }
}

/// Maximizes the total speedup rate by equalizing marginal speedups.
#[derive(Debug, Clone)]
pub struct Greedy {
    speedups: Vec<SpeedupFunction>,
    top: f64,
}

impl Greedy {
    pub fn new(classes: &[JobClass]) -> Self {
        let speedups: Vec<_> = classes.iter().map(|c| c.speedup.clone()).collect();
        let top = speedups.iter().map(|s| s.max_marginal()).fold(0.0, f64::max);
        Greedy { speedups, top }
    }
}

impl Policy for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn allocate(&mut self, jobs: &[JobView], n: f64, out: &mut Allocation) {
        out.reset(jobs.len());
        if jobs.is_empty() {
            return;
        }
        if jobs.len() as f64 > n {
            oldest_first(n, out);
            return;
        }
        let counts = class_counts(jobs, self.speedups.len());
        let (_, widths, saturated) =
            clear_market(&counts, n, self.top, |i, theta| self.speedups[i].marginal_demand(theta));
        out.saturated = saturated;
        for (k, j) in out.cores.iter_mut().zip(jobs) {
            *k = widths[j.class];
        }
    }
}

/// One core each for the oldest `floor(n)` jobs; the GI/GI/n coupling baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fcfs1;

impl Policy for Fcfs1 {
    fn name(&self) -> &'static str {
        "fcfs1"
    }

    fn allocate(&mut self, jobs: &[JobView], n: f64, out: &mut Allocation) {
        out.reset(jobs.len());
        oldest_first(n, out);
    }
}

/// Fixed-width plan: per-class width, core pool and slot count.
#[derive(Debug, Clone, PartialEq)]
pub struct FwCamPlan {
    pub beta: f64,
    /// `k_i = k*_i(lambda_i, n - n^beta)` at the scaled system.
    pub widths: Vec<f64>,
    /// `r_i = lambda_i E[X_i] k_i / s_i(k_i)`.
    pub effective_loads: Vec<f64>,
    /// `n_i = n r_i / sum_j r_j`.
    pub pools: Vec<f64>,
    /// `floor(n_i / k_i)` jobs of class `i` can run at once.
    pub slots: Vec<usize>,
    pub cores: f64,
}

impl FwCamPlan {
    pub fn new(w: &WorkloadSpec, d: f64, beta: f64) -> Result<Self, PolicyError> {
        if !(beta > 0.75 && beta < 1.0) {
            return Err(PolicyError::Beta(beta));
        }
        let n = w.cores_at(d);
        let classes = relax_classes(w, d);
        let sol = solve_relaxed(&classes, n - n.powf(beta))?;
        let total: f64 = sol.effective_loads.iter().sum();
        let pools: Vec<f64> = sol.effective_loads.iter().map(|r| n * r / total).collect();
        let slots = pools
            .iter()
            .zip(&sol.allocations)
            .map(|(p, k)| (p / k + 1e-9).floor() as usize)
            .collect();
        Ok(FwCamPlan {
            beta,
            widths: sol.allocations,
            effective_loads: sol.effective_loads,
            pools,
            slots,
            cores: n,
        })
    }

    /// Some class has no slot at all and can never be served.
    pub fn starves_a_class(&self) -> bool {
        self.slots.contains(&0)
    }
}

/// Fixed-width policy: class `i` runs its oldest `slots_i` jobs at `k_i` cores.
///
/// Pools are private to a class: cores freed in one class idle rather than
/// serve another class's queue.
#[derive(Debug, Clone)]
pub struct FwCam {
    plan: FwCamPlan,
    running: Vec<usize>,
}

impl FwCam {
    pub fn new(plan: FwCamPlan) -> Self {
        let m = plan.widths.len();
        FwCam { plan, running: vec![0; m] }
    }

    pub fn plan(&self) -> &FwCamPlan {
        &self.plan
    }
}

impl Policy for FwCam {
    fn name(&self) -> &'static str {
        "fwcam"
    }

    fn allocate(&mut self, jobs: &[JobView], _n: f64, out: &mut Allocation) {
        out.reset(jobs.len());
        self.running.iter_mut().for_each(|r| *r = 0);
        for (k, j) in out.cores.iter_mut().zip(jobs) {
            if self.running[j.class] < self.plan.slots[j.class] {
                self.running[j.class] += 1;
                *k = self.plan.widths[j.class];
            }
        }
    }
}
