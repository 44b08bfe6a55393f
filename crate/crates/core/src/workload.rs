//! Job classes, arrival processes, phase-type sizes and seeded sampling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::speedup::{SpeedupError, SpeedupFunction};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("invalid phase-type distribution: {0}")]
    PhaseType(String),
    #[error("invalid arrival process: {0}")]
    Arrival(String),
    #[error("invalid job class {class}: {reason}")]
    Class { class: usize, reason: String },
    #[error("system load {rho} is not below 1")]
    Overloaded { rho: f64 },
    #[error("invalid core count {0}")]
    Cores(f64),
    #[error(transparent)]
    Speedup(#[from] SpeedupError),
}

/// Absorption time of a finite continuous-time Markov chain.
///
/// `p` is the initial distribution over the transient phases and `q` the
/// sub-generator restricted to them; the exit rate of phase `u` is minus the
/// row sum of `q`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseTypeDist {
    p: Vec<f64>,
    q: Vec<Vec<f64>>,
    #[serde(skip)]
    occupancy: Vec<f64>,
    #[serde(skip)]
    jumps: Vec<Vec<f64>>,
}

impl PhaseTypeDist {
    pub fn new(p: Vec<f64>, q: Vec<Vec<f64>>) -> Result<Self, WorkloadError> {
        let k = p.len();
        let bad = |m: String| Err(WorkloadError::PhaseType(m));
        if k == 0 {
            return bad("no phases".into());
        }
        if q.len() != k || q.iter().any(|row| row.len() != k) {
            return bad(format!("sub-generator must be {k}x{k}"));
        }
        if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return bad("initial probabilities must be nonnegative".into());
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("initial probabilities sum to {total}, not 1"));
        }
        for (u, row) in q.iter().enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return bad(format!("row {u} is not finite"));
            }
            if !(row[u] < 0.0) {
                return bad(format!("diagonal entry {u} must be negative"));
            }
            for (v, &x) in row.iter().enumerate() {
                if v != u && x < 0.0 {
                    return bad(format!("off-diagonal entry ({u},{v}) is negative"));
                }
            }
            let sum: f64 = row.iter().sum();
            if sum > 1e-12 * row[u].abs() {
                return bad(format!("row {u} sums to {sum} > 0"));
            }
        }
        // occupancy = -p Q^{-1}, i.e. solve Q^T w = -p^T
        let qm = DMatrix::from_fn(k, k, |i, j| q[i][j]);
        let lu = qm.transpose().lu();
        let rhs = DVector::from_iterator(k, p.iter().map(|x| -x));
        let w = lu
            .solve(&rhs)
            .ok_or_else(|| WorkloadError::PhaseType("sub-generator is singular".into()))?;
        let occupancy: Vec<f64> = w.iter().copied().collect();
        let mean: f64 = occupancy.iter().sum();
        if !(mean > 0.0) || !mean.is_finite() || occupancy.iter().any(|x| *x < -1e-9 * mean) {
            return bad("sub-generator has no proper absorbing structure".into());
        }
        let jumps = q
            .iter()
            .enumerate()
            .map(|(u, row)| {
                let rate = -row[u];
                let mut acc = 0.0;
                (0..k)
                    .map(|v| {
                        if v != u {
                            acc += row[v] / rate;
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(PhaseTypeDist { p, q, occupancy, jumps })
    }

    pub fn exponential(rate: f64) -> Result<Self, WorkloadError> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(WorkloadError::PhaseType(format!("rate {rate} must be positive")));
        }
        Self::new(vec![1.0], vec![vec![-rate]])
    }

    /// Mixture of exponentials: with probability `probs[j]` the size is `Exp(rates[j])`.
    pub fn hyperexp(probs: &[f64], rates: &[f64]) -> Result<Self, WorkloadError> {
        if probs.len() != rates.len() {
            return Err(WorkloadError::PhaseType("probs and rates differ in length".into()));
        }
        let k = rates.len();
        let q = (0..k)
            .map(|i| (0..k).map(|j| if i == j { -rates[i] } else { 0.0 }).collect())
            .collect();
        Self::new(probs.to_vec(), q)
    }

    /// Sum of `phases` exponential stages with a common `rate`.
    pub fn erlang(phases: usize, rate: f64) -> Result<Self, WorkloadError> {
        if phases == 0 {
            return Err(WorkloadError::PhaseType("Erlang needs at least one phase".into()));
        }
        let mut p = vec![0.0; phases];
        p[0] = 1.0;
        let q = (0..phases)
            .map(|i| {
                (0..phases)
                    .map(|j| {
                        if i == j {
                            -rate
                        } else if j == i + 1 {
                            rate
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(p, q)
    }

    pub fn phases(&self) -> usize {
        self.p.len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.p
    }

    pub fn generator(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn exit_rate(&self, u: usize) -> f64 {
        -self.q[u].iter().sum::<f64>()
    }

    /// Expected time spent in each phase before absorption, `-p Q^{-1}`.
    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    /// `E[X] = -p Q^{-1} 1`.
    pub fn mean(&self) -> f64 {
        self.occupancy.iter().sum()
    }

    /// Draws an absorption time, returning it together with the starting phase.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, usize) {
        let start = pick(&self.p, rng.gen::<f64>());
        let mut phase = start;
        let mut t = 0.0;
        loop {
            let rate = -self.q[phase][phase];
            let e: f64 = Exp1.sample(rng);
            t += e / rate;
            let u: f64 = rng.gen();
            let row = &self.jumps[phase];
            match row.iter().position(|&acc| u < acc) {
                Some(next) if next != phase => phase = next,
                _ => return (t, start),
            }
        }
    }
}

fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last phase with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SizeSpec {
    Exponential { rate: f64 },
    Hyperexp { probs: Vec<f64>, rates: Vec<f64> },
    Erlang { k: usize, rate: f64 },
    Phase {
        p: Vec<f64>,
        #[serde(rename = "Q")]
        q: Vec<Vec<f64>>,
    },
    Deterministic { value: f64 },
}

/// Job size distribution. Only the phase-type case has a fluid model.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "SizeSpec")]
pub enum SizeDist {
    PhaseType(PhaseTypeDist),
    Deterministic(f64),
}

impl TryFrom<SizeSpec> for SizeDist {
    type Error = WorkloadError;

    fn try_from(spec: SizeSpec) -> Result<Self, Self::Error> {
        Ok(match spec {
            SizeSpec::Exponential { rate } => SizeDist::PhaseType(PhaseTypeDist::exponential(rate)?),
            SizeSpec::Hyperexp { probs, rates } => {
                SizeDist::PhaseType(PhaseTypeDist::hyperexp(&probs, &rates)?)
            }
            SizeSpec::Erlang { k, rate } => SizeDist::PhaseType(PhaseTypeDist::erlang(k, rate)?),
            SizeSpec::Phase { p, q } => SizeDist::PhaseType(PhaseTypeDist::new(p, q)?),
            SizeSpec::Deterministic { value } => {
                if !(value > 0.0) || !value.is_finite() {
                    return Err(WorkloadError::PhaseType(format!("deterministic size {value} must be positive")));
                }
                SizeDist::Deterministic(value)
            }
        })
    }
}

impl SizeDist {
    pub fn mean(&self) -> f64 {
        match self {
            SizeDist::PhaseType(ph) => ph.mean(),
            SizeDist::Deterministic(x) => *x,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, usize) {
        match self {
            SizeDist::PhaseType(ph) => ph.sample(rng),
            SizeDist::Deterministic(x) => (*x, 0),
        }
    }

    pub fn phase_type(&self) -> Option<&PhaseTypeDist> {
        match self {
            SizeDist::PhaseType(ph) => Some(ph),
            SizeDist::Deterministic(_) => None,
        }
    }
}

/// Renewal arrival process with rate `rate`; finite second moment for every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArrivalProcess {
    Poisson { rate: f64 },
    Deterministic { rate: f64 },
    /// Gamma inter-arrival times with the given shape and mean `1 / rate`.
    Gamma { rate: f64, shape: f64 },
}

impl ArrivalProcess {
    pub fn rate(&self) -> f64 {
        match self {
            ArrivalProcess::Poisson { rate }
            | ArrivalProcess::Deterministic { rate }
            | ArrivalProcess::Gamma { rate, .. } => *rate,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let rate = self.rate();
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(WorkloadError::Arrival(format!("rate {rate} must be positive")));
        }
        if let ArrivalProcess::Gamma { shape, .. } = self {
            if !(*shape > 0.0) || !shape.is_finite() {
                return Err(WorkloadError::Arrival(format!("gamma shape {shape} must be positive")));
            }
        }
        Ok(())
    }

    /// One inter-arrival time of the system scaled by `d` (the base draw divided by `d`).
    pub fn sample_interarrival<R: Rng + ?Sized>(&self, rng: &mut R, d: f64) -> f64 {
        let base = match self {
            ArrivalProcess::Poisson { rate } => {
                let e: f64 = Exp1.sample(rng);
                e / rate
            }
            ArrivalProcess::Deterministic { rate } => 1.0 / rate,
            ArrivalProcess::Gamma { rate, shape } => {
                // validated: shape > 0, scale > 0
                let g = Gamma::new(*shape, 1.0 / (rate * shape)).expect("validated gamma parameters");
                g.sample(rng)
            }
        };
        base / d
    }
}

/// One job class: arrivals, sizes, holding cost rate and speedup.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobClass {
    pub arrival: ArrivalProcess,
    pub size: SizeDist,
    pub holding_cost: f64,
    pub speedup: SpeedupFunction,
}

impl JobClass {
    pub fn new(
        arrival: ArrivalProcess,
        size: SizeDist,
        holding_cost: f64,
        speedup: SpeedupFunction,
    ) -> Self {
        JobClass { arrival, size, holding_cost, speedup }
    }

    pub fn rate(&self) -> f64 {
        self.arrival.rate()
    }

    pub fn mean_size(&self) -> f64 {
        self.size.mean()
    }

    /// Offered work rate `lambda E[X]` at base scale.
    pub fn offered_load(&self) -> f64 {
        self.rate() * self.mean_size()
    }

    fn validate(&self, idx: usize) -> Result<(), WorkloadError> {
        self.arrival.validate().map_err(|e| WorkloadError::Class { class: idx, reason: e.to_string() })?;
        if !(self.holding_cost > 0.0) || !self.holding_cost.is_finite() {
            return Err(WorkloadError::Class {
                class: idx,
                reason: format!("holding cost {} must be positive", self.holding_cost),
            });
        }
        Ok(())
    }
}

/// Base-scale workload: classes and core count `n`. Scaling by `d`
/// multiplies arrival rates and cores and leaves everything else fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub classes: Vec<JobClass>,
    pub n: f64,
}

impl WorkloadSpec {
    pub fn new(classes: Vec<JobClass>, n: f64) -> Result<Self, WorkloadError> {
        if !(n > 0.0) || !n.is_finite() {
            return Err(WorkloadError::Cores(n));
        }
        if classes.is_empty() {
            return Err(WorkloadError::Class { class: 0, reason: "workload has no classes".into() });
        }
        for (i, c) in classes.iter().enumerate() {
            c.validate(i)?;
        }
        let w = WorkloadSpec { classes, n };
        let rho = w.system_load();
        if !(rho < 1.0) {
            return Err(WorkloadError::Overloaded { rho });
        }
        Ok(w)
    }

    /// `rho = (1/n) sum_i lambda_i E[X_i]`; the same at every scale.
    pub fn system_load(&self) -> f64 {
        self.classes.iter().map(JobClass::offered_load).sum::<f64>() / self.n
    }

    pub fn total_rate(&self) -> f64 {
        self.classes.iter().map(JobClass::rate).sum()
    }

    pub fn cores_at(&self, d: f64) -> f64 {
        self.n * d
    }
}

/// `rho` of a workload; see [`WorkloadSpec::system_load`].
pub fn system_load(w: &WorkloadSpec) -> f64 {
    w.system_load()
}

/// Core-seconds used running inherent work `x` on `k` cores.
pub fn effective_work(s: &SpeedupFunction, x: f64, k: f64) -> Result<f64, WorkloadError> {
    Ok(s.effective_work(x, k)?)
}

/// Mixes a base seed with cell coordinates into an independent 64-bit seed.
///
/// SplitMix64 finalizer applied after each word, so the result depends on
/// the values but not on the order in which unrelated cells are created.
pub fn derive_seed(base: u64, words: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    words.iter().fold(mix(base), |acc, &w| mix(acc ^ mix(w)))
}

/// Arrival and size realization of one class in one replica.
///
/// Draws come from a dedicated ChaCha stream, so the realization depends only
/// on `(seed, class)`, never on the policy being simulated.
#[derive(Debug, Clone)]
pub struct ClassStream {
    rng: ChaCha8Rng,
}

impl ClassStream {
    pub fn new(seed: u64, class: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64 + 1);
        ClassStream { rng }
    }

    /// Next `(inter-arrival time, size, initial phase)` for `class` at scale `d`.
    pub fn next_job(&mut self, class: &JobClass, d: f64) -> (f64, f64, usize) {
        let gap = class.arrival.sample_interarrival(&mut self.rng, d);
        let (size, phase) = class.size.sample(&mut self.rng);
        (gap, size, phase)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_of(n: usize, mut f: impl FnMut() -> f64) -> f64 {
        (0..n).map(|_| f()).sum::<f64>() / n as f64
    }

    #[test]
    fn interarrival_examples() {
        let mut s = ClassStream::new(7, 0);
        let det = ArrivalProcess::Deterministic { rate: 2.0 };
        for _ in 0..5 {
            assert_eq!(det.sample_interarrival(s.rng(), 1.0), 0.5);
        }
        let poi = ArrivalProcess::Poisson { rate: 1.0 };
        let m = mean_of(1_000_000, || poi.sample_interarrival(s.rng(), 1.0));
        assert!((m - 1.0).abs() < 0.01, "{m}");
        let m = mean_of(1_000_000, || poi.sample_interarrival(s.rng(), 10.0));
        assert!((m - 0.1).abs() < 0.001, "{m}");
        let gam = ArrivalProcess::Gamma { rate: 2.0, shape: 3.0 };
        let m = mean_of(200_000, || gam.sample_interarrival(s.rng(), 1.0));
        assert!((m - 0.5).abs() < 0.01, "{m}");
    }

    #[test]
    fn mean_size_examples() {
        assert!((PhaseTypeDist::exponential(5.0).unwrap().mean() - 0.2).abs() < 1e-15);
        let h = PhaseTypeDist::hyperexp(&[0.5, 0.5], &[1.0, 9.0]).unwrap();
        assert!((h.mean() - (0.5 + 0.5 / 9.0)).abs() < 1e-12);
        assert!((PhaseTypeDist::erlang(2, 2.0).unwrap().mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_means_within_three_standard_errors() {
        let cases = [
            (PhaseTypeDist::exponential(5.0).unwrap(), 0.2),
            (PhaseTypeDist::hyperexp(&[0.5, 0.5], &[1.0, 9.0]).unwrap(), 0.5 + 0.5 / 9.0),
            (PhaseTypeDist::erlang(2, 2.0).unwrap(), 1.0),
        ];
        let mut s = ClassStream::new(11, 3);
        for (ph, expect) in cases {
            let n = 1_000_000;
            let xs: Vec<f64> = (0..n).map(|_| ph.sample(s.rng()).0).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((m - expect).abs() < 3.0 * se, "mean {m} vs {expect} (se {se})");
            assert!((m - expect).abs() < 0.01 * expect);
            assert!((m - ph.mean()).abs() < 3.0 * se);
        }
    }

    #[test]
    fn coxian_sampler_matches_linear_solve() {
        // phase 0 -> 1 w.p. 0.6, phase 1 -> 2 w.p. 0.5
        let ph = PhaseTypeDist::new(
            vec![0.7, 0.3, 0.0],
            vec![vec![-2.0, 1.2, 0.0], vec![0.0, -1.0, 0.5], vec![0.0, 0.0, -4.0]],
        )
        .unwrap();
        // E from phase 2: 1/4; phase 1: 1 + 0.5/4; phase 0: 0.5 + 0.6 * E1
        let e2 = 0.25;
        let e1 = 1.0 + 0.5 * e2;
        let e0 = 0.5 + 0.6 * e1;
        assert!((ph.mean() - (0.7 * e0 + 0.3 * e1)).abs() < 1e-12);
        let mut s = ClassStream::new(1, 0);
        let m = mean_of(400_000, || ph.sample(s.rng()).0);
        assert!((m - ph.mean()).abs() < 0.01 * ph.mean());
    }

    #[test]
    fn rejects_bad_phase_type() {
        assert!(PhaseTypeDist::new(vec![0.5, 0.4], vec![vec![-1.0, 0.0], vec![0.0, -1.0]]).is_err());
        assert!(PhaseTypeDist::new(vec![1.0], vec![vec![1.0]]).is_err());
        assert!(PhaseTypeDist::new(vec![0.5, 0.5], vec![vec![-1.0, -0.5], vec![0.0, -1.0]]).is_err());
        // closed loop without exit: singular
        assert!(PhaseTypeDist::new(vec![1.0, 0.0], vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).is_err());
        assert!(PhaseTypeDist::exponential(0.0).is_err());
    }

    fn three_class() -> WorkloadSpec {
        let classes = vec![
            JobClass::new(
                ArrivalProcess::Poisson { rate: 1.0 },
                SizeDist::PhaseType(PhaseTypeDist::exponential(5.0).unwrap()),
                1.0,
                SpeedupFunction::power(0.3).unwrap(),
            ),
            JobClass::new(
                ArrivalProcess::Poisson { rate: 2.0 },
                SizeDist::PhaseType(PhaseTypeDist::hyperexp(&[0.5, 0.5], &[1.0, 9.0]).unwrap()),
                2.0,
                SpeedupFunction::power(0.5).unwrap(),
            ),
            JobClass::new(
                ArrivalProcess::Poisson { rate: 5.0 / 3.0 },
                SizeDist::PhaseType(PhaseTypeDist::exponential(3.0).unwrap()),
                1.0,
                SpeedupFunction::amdahl(0.2).unwrap(),
            ),
        ];
        WorkloadSpec::new(classes, 7.4667).unwrap()
    }

    #[test]
    fn system_load_examples() {
        assert!((three_class().system_load() - 0.25).abs() < 1e-5);
        let one = WorkloadSpec::new(
            vec![JobClass::new(
                ArrivalProcess::Poisson { rate: 1.0 },
                SizeDist::Deterministic(2.0),
                1.0,
                SpeedupFunction::power(0.5).unwrap(),
            )],
            4.0,
        )
        .unwrap();
        assert_eq!(system_load(&one), 0.5);
        let over = WorkloadSpec::new(one.classes.clone(), 2.0);
        assert!(matches!(over, Err(WorkloadError::Overloaded { .. })));
    }

    #[test]
    fn streams_are_deterministic_and_independent() {
        let w = three_class();
        let mut a = ClassStream::new(42, 1);
        let mut b = ClassStream::new(42, 1);
        let mut c = ClassStream::new(42, 2);
        let xa: Vec<_> = (0..100).map(|_| a.next_job(&w.classes[1], 4.0)).collect();
        let xb: Vec<_> = (0..100).map(|_| b.next_job(&w.classes[1], 4.0)).collect();
        let xc: Vec<_> = (0..100).map(|_| c.next_job(&w.classes[1], 4.0)).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn effective_work_not_below_inherent() {
        let s = SpeedupFunction::amdahl(0.3).unwrap();
        for k in [1.0, 1.5, 3.0, 100.0] {
            assert!(effective_work(&s, 2.5, k).unwrap() >= 2.5);
        }
    }

    #[test]
    fn derived_seeds_differ_per_word() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_ne!(derive_seed(1, &[0]), derive_seed(2, &[0]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }

    #[test]
    fn size_spec_parses() {
        let s: SizeDist = serde_json::from_str(r#"{"type":"hyperexp","probs":[0.5,0.5],"rates":[1.0,9.0]}"#).unwrap();
        assert!((s.mean() - 0.5555555555555556).abs() < 1e-12);
        let s: SizeDist = serde_json::from_str(r#"{"type":"phase","p":[1.0],"Q":[[-4.0]]}"#).unwrap();
        assert_eq!(s.mean(), 0.25);
        assert!(serde_json::from_str::<SizeDist>(r#"{"type":"exponential","rate":-1}"#).is_err());
    }
}
