//! Event-driven simulation of a core pool serving malleable jobs.
//!
//! Allocations change only at arrivals and completions, so between events
//! every running job drains at the constant rate `s_i(k)` and the next
//! completion time is known exactly. Sizes are drawn in full at arrival.
//!
//! Each class draws inter-arrival times and sizes from its own ChaCha stream
//! seeded by `(seed, class)`. Two runs with the same seed therefore see the
//! same arrival trace whatever the policy, which is what makes coupled
//! comparisons and common-random-number sweeps possible.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::policies::{Allocation, JobView, Policy, PolicyError, PolicyKind};
use crate::relaxopt::{value_lower_bound, RelaxError};
use crate::workload::{derive_seed, ClassStream, WorkloadSpec};

pub const DEFAULT_LIVE_CAP: usize = 1_000_000;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.2;
/// Expected arrivals per cell; with a 20% warmup this leaves about 10^5 measured completions.
pub const DEFAULT_ARRIVALS_PER_CELL: f64 = 130_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("horizon {horizon} must exceed warmup {warmup} >= 0")]
    Window { horizon: f64, warmup: f64 },
    #[error("scale d = {0} must be >= 1")]
    Scale(f64),
    #[error("non-finite quantity in event loop: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: f64,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    pub live_cap: usize,
    /// Record the live job count every `trace_step` time units.
    pub trace_step: Option<f64>,
}

impl RunConfig {
    pub fn new(d: f64, horizon: f64, warmup: f64, seed: u64) -> Self {
        RunConfig { d, horizon, warmup, seed, live_cap: DEFAULT_LIVE_CAP, trace_step: None }
    }

    /// Horizon long enough for `arrivals` expected arrivals at scale `d`.
    pub fn for_arrivals(w: &WorkloadSpec, d: f64, arrivals: f64, warmup_fraction: f64, seed: u64) -> Self {
        let horizon = arrivals / (w.total_rate() * d);
        RunConfig::new(d, horizon, warmup_fraction * horizon, seed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMetrics {
    pub arrivals: u64,
    pub completions: u64,
    pub response_sum: f64,
    /// Integral of the live class count over the measurement window.
    pub count_area: f64,
    /// Integral of the number of waiting (zero-core) jobs over the window.
    pub queue_area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub policy: &'static str,
    pub d: f64,
    pub n: f64,
    pub seed: u64,
    pub horizon: f64,
    pub warmup: f64,
    /// Total arrival rate at this scale.
    pub rate: f64,
    pub holding_costs: Vec<f64>,
    pub cost_integral: f64,
    pub classes: Vec<ClassMetrics>,
    pub mode1_time: f64,
    pub saturated_time: f64,
    pub idle_core_area: f64,
    pub ledger_max_rel_err: f64,
    pub max_capacity_excess: f64,
    pub floor_violations: u64,
    pub unstable: bool,
    /// Time the run actually reached (below `horizon` only if unstable).
    pub end_time: f64,
    pub events: u64,
    pub trace: Vec<(f64, usize)>,
}

impl SimMetrics {
    fn window(&self) -> f64 {
        (self.end_time - self.warmup).max(0.0)
    }

    /// Time-average holding cost rate divided by the total arrival rate.
    pub fn normalized_cost(&self) -> f64 {
        self.cost_integral / (self.window() * self.rate)
    }

    /// The same quantity computed from completed jobs' response times.
    pub fn normalized_cost_from_responses(&self) -> f64 {
        let w = self.window();
        self.classes
            .iter()
            .zip(&self.holding_costs)
            .map(|(c, h)| h * c.response_sum / w)
            .sum::<f64>()
            / self.rate
    }

    pub fn mean_response(&self, class: usize) -> f64 {
        let c = &self.classes[class];
        c.response_sum / c.completions as f64
    }

    pub fn observed_rate(&self, class: usize) -> f64 {
        self.classes[class].completions as f64 / self.window()
    }

    pub fn mean_count(&self, class: usize) -> f64 {
        self.classes[class].count_area / self.window()
    }

    pub fn mean_queue(&self, class: usize) -> f64 {
        self.classes[class].queue_area / self.window()
    }

    pub fn mode1_fraction(&self) -> f64 {
        self.mode1_time / self.window()
    }

    pub fn idle_fraction(&self) -> f64 {
        self.idle_core_area / (self.window() * self.n)
    }

    pub fn total_completions(&self) -> u64 {
        self.classes.iter().map(|c| c.completions).sum()
    }
}

#[derive(Debug, Clone)]
struct Job {
    view: JobView,
    size: f64,
    served: f64,
    rate: f64,
    cores: f64,
}

/// Pre-drawn next arrival of one class.
struct Pending {
    time: f64,
    size: f64,
}

/// Simulates `w` at scale `cfg.d` under `policy`.
pub fn run(w: &WorkloadSpec, policy: &mut dyn Policy, cfg: &RunConfig) -> Result<SimMetrics, SimError> {
    if !(cfg.horizon > cfg.warmup && cfg.warmup >= 0.0) || !cfg.horizon.is_finite() {
        return Err(SimError::Window { horizon: cfg.horizon, warmup: cfg.warmup });
    }
    if !(cfg.d >= 1.0) {
        return Err(SimError::Scale(cfg.d));
    }
    let m = w.classes.len();
    let d = cfg.d;
    let n = w.cores_at(d);
    let (t_end, t_warm) = (cfg.horizon, cfg.warmup);
    let costs: Vec<f64> = w.classes.iter().map(|c| c.holding_cost).collect();

    let mut streams: Vec<ClassStream> = (0..m).map(|i| ClassStream::new(cfg.seed, i)).collect();
    let mut pending: Vec<Pending> = (0..m)
        .map(|i| {
            let (gap, size, _) = streams[i].next_job(&w.classes[i], d);
            Pending { time: gap, size }
        })
        .collect();

    let mut metrics = SimMetrics {
        policy: policy.name(),
        d,
        n,
        seed: cfg.seed,
        horizon: t_end,
        warmup: t_warm,
        rate: w.total_rate() * d,
        holding_costs: costs.clone(),
        cost_integral: 0.0,
        classes: vec![ClassMetrics::default(); m],
        mode1_time: 0.0,
        saturated_time: 0.0,
        idle_core_area: 0.0,
        ledger_max_rel_err: 0.0,
        max_capacity_excess: 0.0,
        floor_violations: 0,
        unstable: false,
        end_time: t_end,
        events: 0,
        trace: Vec::new(),
    };

    let mut jobs: Vec<Job> = Vec::new();
    let mut views: Vec<JobView> = Vec::new();
    let mut alloc = Allocation::default();
    let mut live = vec![0usize; m];
    let mut waiting = vec![0usize; m];
    let mut used = 0.0;
    let mut next_id = 0u64;
    let mut next_sample = cfg.trace_step.map(|_| 0.0);
    let mut t = 0.0;

    loop {
        // next arrival (lowest class index on ties)
        let (arr_class, t_arr) = pending
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, p)| if p.time < best.1 { (i, p.time) } else { best });
        // next completion (lowest position, which is also lowest id, on ties)
        let mut t_comp = f64::INFINITY;
        let mut comp_idx = usize::MAX;
        for (idx, j) in jobs.iter().enumerate() {
            if j.rate > 0.0 {
                let tc = t + j.view.remaining / j.rate;
                if tc < t_comp {
                    t_comp = tc;
                    comp_idx = idx;
                }
            }
        }
        let t_next = t_arr.min(t_comp).min(t_end);
        if !t_next.is_finite() {
            return Err(SimError::NonFinite(format!("next event time at t = {t}")));
        }

        // accumulate time averages over the part of [t, t_next] inside the window
        let overlap = (t_next.min(t_end) - t.max(t_warm)).max(0.0);
        if overlap > 0.0 {
            for i in 0..m {
                metrics.classes[i].count_area += overlap * live[i] as f64;
                metrics.classes[i].queue_area += overlap * waiting[i] as f64;
                metrics.cost_integral += overlap * costs[i] * live[i] as f64;
            }
            metrics.idle_core_area += overlap * (n - used).max(0.0);
            if alloc.overload_mode {
                metrics.mode1_time += overlap;
            }
            if alloc.saturated {
                metrics.saturated_time += overlap;
            }
        }
        if let (Some(step), Some(s)) = (cfg.trace_step, next_sample.as_mut()) {
            while *s < t_next {
                metrics.trace.push((*s, jobs.len()));
                *s += step;
            }
        }

        let dt = t_next - t;
        let completing = if t_comp <= t_arr && t_comp < t_end { comp_idx } else { usize::MAX };
        for (idx, j) in jobs.iter_mut().enumerate().filter(|(_, j)| j.rate > 0.0) {
            // the completing job's interval is exactly remaining / rate, which the
            // absolute clock can only represent to within one ulp of t
            let work = if idx == completing { j.view.remaining } else { j.rate * dt };
            j.served += work;
            j.view.remaining -= work;
        }
        t = t_next;
        if t >= t_end {
            break;
        }
        metrics.events += 1;

        if t_comp <= t_arr {
            jobs[comp_idx].view.remaining = 0.0;
            let mut k = 0;
            while k < jobs.len() {
                let j = &jobs[k];
                if j.rate > 0.0 && j.view.remaining <= 1e-12 * j.size {
                    let j = jobs.remove(k);
                    let err = (j.served - j.size).abs() / j.size;
                    metrics.ledger_max_rel_err = metrics.ledger_max_rel_err.max(err);
                    let c = j.view.class;
                    live[c] -= 1;
                    if t >= t_warm {
                        metrics.classes[c].completions += 1;
                        metrics.classes[c].response_sum += t - j.view.arrival;
                    }
                } else {
                    k += 1;
                }
            }
        } else {
            let c = arr_class;
            let size = pending[c].size;
            if !size.is_finite() || size <= 0.0 {
                return Err(SimError::NonFinite(format!("sampled size {size} for class {c}")));
            }
            jobs.push(Job {
                view: JobView { id: next_id, class: c, arrival: t, remaining: size },
                size,
                served: 0.0,
                rate: 0.0,
                cores: 0.0,
            });
            next_id += 1;
            live[c] += 1;
            if t >= t_warm {
                metrics.classes[c].arrivals += 1;
            }
            let (gap, size, _) = streams[c].next_job(&w.classes[c], d);
            pending[c] = Pending { time: t + gap, size };
            if jobs.len() > cfg.live_cap {
                metrics.unstable = true;
                metrics.end_time = t.max(t_warm);
                break;
            }
        }

        views.clear();
        views.extend(jobs.iter().map(|j| j.view));
        policy.allocate(&views, n, &mut alloc);
        used = 0.0;
        waiting.iter_mut().for_each(|q| *q = 0);
        for (j, &k) in jobs.iter_mut().zip(&alloc.cores) {
            if k > 0.0 && k < 1.0 - 1e-12 {
                metrics.floor_violations += 1;
            }
            if k != j.cores {
                j.cores = k;
                j.rate = if k > 0.0 { w.classes[j.view.class].speedup.value(k) } else { 0.0 };
            }
            if k == 0.0 {
                waiting[j.view.class] += 1;
            }
            used += k;
        }
        metrics.max_capacity_excess = metrics.max_capacity_excess.max(used - n);
    }
    Ok(metrics)
}

/// Live counts of two policies sampled on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrace {
    pub times: Vec<f64>,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

impl CoupledTrace {
    pub fn mean_a(&self) -> f64 {
        self.a.iter().sum::<usize>() as f64 / self.a.len() as f64
    }

    pub fn mean_b(&self) -> f64 {
        self.b.iter().sum::<usize>() as f64 / self.b.len() as f64
    }
}

/// Runs both policies on the identical arrival and size realization.
pub fn coupled_compare(
    w: &WorkloadSpec,
    a: &mut dyn Policy,
    b: &mut dyn Policy,
    d: f64,
    horizon: f64,
    step: f64,
    seed: u64,
) -> Result<CoupledTrace, SimError> {
    let mut cfg = RunConfig::new(d, horizon, 0.0, seed);
    cfg.trace_step = Some(step);
    let ma = run(w, a, &cfg)?;
    let mb = run(w, b, &cfg)?;
    let len = ma.trace.len().min(mb.trace.len());
    Ok(CoupledTrace {
        times: ma.trace[..len].iter().map(|s| s.0).collect(),
        a: ma.trace[..len].iter().map(|s| s.1).collect(),
        b: mb.trace[..len].iter().map(|s| s.1).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub replicas: usize,
    pub arrivals_per_cell: f64,
    pub warmup_fraction: f64,
    pub base_seed: u64,
    pub beta: f64,
    pub live_cap: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            scales: vec![1.0],
            policies: PolicyKind::ALL.to_vec(),
            replicas: 10,
            arrivals_per_cell: DEFAULT_ARRIVALS_PER_CELL,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            base_seed: 1,
            beta: 0.8,
            live_cap: DEFAULT_LIVE_CAP,
        }
    }
}

/// Seed of replica `replica` at scale `d`. The policy is deliberately not an
/// input, so every policy in a sweep faces the same arrival realizations.
pub fn cell_seed(base: u64, d: f64, replica: usize) -> u64 {
    derive_seed(base, &[d.to_bits(), replica as u64])
}

/// Replica-aggregated results of one (policy, d) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: PolicyKind,
    pub d: f64,
    pub n: f64,
    pub costs: Vec<f64>,
    pub cost_mean: f64,
    pub cost_ci95: f64,
    pub mean_response: Vec<f64>,
    pub mean_queue: Vec<f64>,
    pub queue_ci95: Vec<f64>,
    pub mean_count: Vec<f64>,
    pub mode1_fraction: f64,
    pub idle_fraction: f64,
    pub completions: u64,
    pub lower_bound: f64,
    pub flags: Vec<String>,
}

impl SweepRow {
    pub fn ratio(&self) -> f64 {
        self.cost_mean / self.lower_bound
    }

    pub fn unstable(&self) -> bool {
        self.flags.iter().any(|f| f == "unstable")
    }
}

/// Mean and 95% Student-t half-width; the half-width is NaN for one sample.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let r = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / r;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let t = StudentsT::new(0.0, 1.0, r - 1.0).expect("dof >= 1").inverse_cdf(0.975);
    (mean, t * (var / r).sqrt())
}

fn run_cell(w: &WorkloadSpec, kind: PolicyKind, d: f64, seed: u64, cfg: &SweepConfig) -> Result<SimMetrics, SimError> {
    let mut policy = kind.build(w, d, cfg.beta)?;
    let mut rc = RunConfig::for_arrivals(w, d, cfg.arrivals_per_cell, cfg.warmup_fraction, seed);
    rc.live_cap = cfg.live_cap;
    run(w, policy.as_mut(), &rc)
}

fn column_mean(ms: &[SimMetrics], f: impl Fn(&SimMetrics) -> f64) -> f64 {
    ms.iter().map(f).sum::<f64>() / ms.len() as f64
}

/// Runs every (policy, d, replica) cell in parallel and aggregates per (policy, d).
///
/// Rows come back in configuration order regardless of scheduling. A failing
/// cell is reported in its row's flags and does not stop the sweep.
pub fn sweep(w: &WorkloadSpec, cfg: &SweepConfig) -> Result<Vec<SweepRow>, SimError> {
    let lower_bound = value_lower_bound(w)?;
    let cells: Vec<(PolicyKind, f64, usize)> = cfg
        .policies
        .iter()
        .flat_map(|&p| cfg.scales.iter().flat_map(move |&d| (0..cfg.replicas).map(move |r| (p, d, r))))
        .collect();
    let results: Vec<Result<SimMetrics, SimError>> = cells
        .par_iter()
        .map(|&(p, d, r)| run_cell(w, p, d, cell_seed(cfg.base_seed, d, r), cfg))
        .collect();

    let m = w.classes.len();
    let mut rows = Vec::new();
    for (chunk_cells, chunk) in cells.chunks(cfg.replicas.max(1)).zip(results.chunks(cfg.replicas.max(1))) {
        let (policy, d, _) = chunk_cells[0];
        let mut flags = Vec::new();
        let mut ok = Vec::new();
        for r in chunk {
            match r {
                Ok(mt) => ok.push(mt.clone()),
                Err(e) => flags.push(format!("error: {e}")),
            }
        }
        if ok.iter().any(|mt| mt.unstable) {
            flags.push("unstable".into());
        }
        if ok.iter().any(|mt| mt.saturated_time > 0.0) {
            flags.push("saturated".into());
        }
        if policy == PolicyKind::Fwcam {
            if let Ok(plan) = crate::policies::FwCamPlan::new(w, d, cfg.beta) {
                if plan.starves_a_class() {
                    flags.push("fwcam-starved-class".into());
                }
            }
        }
        let costs: Vec<f64> = ok.iter().map(|mt| mt.normalized_cost()).collect();
        let (cost_mean, cost_ci95) = if costs.is_empty() { (f64::NAN, f64::NAN) } else { mean_ci95(&costs) };
        rows.push(SweepRow {
            policy,
            d,
            n: w.cores_at(d),
            cost_mean,
            cost_ci95,
            costs,
            mean_response: (0..m).map(|i| column_mean(&ok, |mt| mt.mean_response(i))).collect(),
            mean_queue: (0..m).map(|i| column_mean(&ok, |mt| mt.mean_queue(i))).collect(),
            queue_ci95: (0..m)
                .map(|i| {
                    let qs: Vec<f64> = ok.iter().map(|mt| mt.mean_queue(i)).collect();
                    if qs.is_empty() { f64::NAN } else { mean_ci95(&qs).1 }
                })
                .collect(),
            mean_count: (0..m).map(|i| column_mean(&ok, |mt| mt.mean_count(i))).collect(),
            mode1_fraction: column_mean(&ok, |mt| mt.mode1_fraction()),
            idle_fraction: column_mean(&ok, |mt| mt.idle_fraction()),
            completions: ok.iter().map(|mt| mt.total_completions()).min().unwrap_or(0),
            lower_bound,
            flags,
        });
    }
    Ok(rows)
}
