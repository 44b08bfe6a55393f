//! Speedup functions and the Whittle calculus built on them.
//!
//! A speedup function `s(k)` maps a (fractional) core count `k >= 1` to the
//! factor by which a job runs faster than on one core. Every function here
//! satisfies `s(1) = 1`, `s(k) <= k`, monotonicity, concavity and is not
//! perfectly elastic.
//!
//! On top of `s` the module provides the penalty ratio
//!
//! ```text
//! f(k) = s'(k) / (s(k) - k s'(k))
//! ```
//!
//! its inverse, and the per-class demand at a price `ell`:
//! `g(ell) = 1` when `ell >= c f(1)`, otherwise `f^{-1}(ell / c)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roots;

/// Denominator of `f` at or below which a function counts as perfectly elastic.
pub const ELASTIC_TOL: f64 = 1e-12;

/// Step used by the finite-difference derivative of tabulated functions.
const TABLE_DIFF_STEP: f64 = 1e-6;

/// Upper limit on bracket expansion when inverting `f` numerically.
const MAX_CORES: f64 = 1e15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpeedupError {
    #[error("core count {0} is below one core")]
    BelowOneCore(f64),
    #[error("invalid speedup parameter: {0}")]
    InvalidParameter(String),
    #[error("speedup axiom violated: {0}")]
    Axiom(String),
    #[error("speedup is perfectly elastic at k = {0}")]
    PerfectlyElastic(f64),
    #[error("penalty ratio {y} outside (0, f(1) = {max}]")]
    PenaltyOutOfRange { y: f64, max: f64 },
    #[error("demand at penalty ratio {0} is unbounded")]
    UnboundedDemand(f64),
    #[error("tabulated speedup functions are not twice differentiable and cannot drive WHAM")]
    NotStrictlyConcave,
}

/// Serialized form used in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SpeedupSpec {
    Power { p: f64 },
    Amdahl { sigma: f64 },
    Table { knots: Vec<[f64; 2]> },
}

/// Concave piecewise-linear speedup through a list of knots, flat past the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    ks: Vec<f64>,
    ss: Vec<f64>,
}

impl Tabulated {
    fn new(knots: &[[f64; 2]]) -> Result<Self, SpeedupError> {
        let first = knots
            .first()
            .ok_or_else(|| SpeedupError::InvalidParameter("table needs at least one knot".into()))?;
        if first[0] != 1.0 || first[1] != 1.0 {
            return Err(SpeedupError::Axiom(format!(
                "first knot must be (1, 1), got ({}, {})",
                first[0], first[1]
            )));
        }
        let mut ks = Vec::with_capacity(knots.len());
        let mut ss = Vec::with_capacity(knots.len());
        for (idx, &[k, s]) in knots.iter().enumerate() {
            if !k.is_finite() || !s.is_finite() {
                return Err(SpeedupError::InvalidParameter(format!("knot {idx} is not finite")));
            }
            if let Some(&prev) = ks.last() {
                if k <= prev {
                    return Err(SpeedupError::InvalidParameter(format!(
                        "knot {idx}: core counts must be strictly increasing"
                    )));
                }
            }
            if s > k * (1.0 + 1e-12) {
                return Err(SpeedupError::Axiom(format!("sub-linearity: s({k}) = {s} exceeds {k}")));
            }
            if let Some(&prev) = ss.last() {
                if s < prev {
                    return Err(SpeedupError::Axiom(format!("monotonicity: s({k}) = {s} decreases")));
                }
            }
            ks.push(k);
            ss.push(s);
        }
        let slopes: Vec<f64> = (1..ks.len()).map(|j| (ss[j] - ss[j - 1]) / (ks[j] - ks[j - 1])).collect();
        for (j, w) in slopes.windows(2).enumerate() {
            if w[1] > w[0] * (1.0 + 1e-12) + 1e-15 {
                return Err(SpeedupError::Axiom(format!(
                    "concavity: slope rises after knot {}",
                    j + 1
                )));
            }
        }
        if ks.iter().zip(&ss).all(|(k, s)| *s >= *k) && ks.len() > 1 {
            return Err(SpeedupError::Axiom("perfectly elastic on every knot".into()));
        }
        Ok(Tabulated { ks, ss })
    }

    fn value(&self, k: f64) -> f64 {
        let j = self.ks.partition_point(|&kk| kk <= k);
        if j >= self.ks.len() {
            return *self.ss.last().unwrap();
        }
        // j >= 1 because k >= 1 = ks[0]
        let (k0, k1) = (self.ks[j - 1], self.ks[j]);
        let (s0, s1) = (self.ss[j - 1], self.ss[j]);
        s0 + (s1 - s0) * (k - k0) / (k1 - k0)
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ks.iter().copied().zip(self.ss.iter().copied())
    }
}

/// A validated speedup function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpeedupSpec", into = "SpeedupSpec")]
pub enum SpeedupFunction {
    /// `s(k) = k^p`
    Power { p: f64 },
    /// `s(k) = 1 / (sigma + (1 - sigma) / k)`
    Amdahl { sigma: f64 },
    Table(Tabulated),
}

impl TryFrom<SpeedupSpec> for SpeedupFunction {
    type Error = SpeedupError;

    fn try_from(spec: SpeedupSpec) -> Result<Self, Self::Error> {
        match spec {
            SpeedupSpec::Power { p } => SpeedupFunction::power(p),
            SpeedupSpec::Amdahl { sigma } => SpeedupFunction::amdahl(sigma),
            SpeedupSpec::Table { knots } => SpeedupFunction::table(&knots),
        }
    }
}

impl From<SpeedupFunction> for SpeedupSpec {
    fn from(s: SpeedupFunction) -> Self {
        match s {
            SpeedupFunction::Power { p } => SpeedupSpec::Power { p },
            SpeedupFunction::Amdahl { sigma } => SpeedupSpec::Amdahl { sigma },
            SpeedupFunction::Table(t) => SpeedupSpec::Table {
                knots: t.knots().map(|(k, s)| [k, s]).collect(),
            },
        }
    }
}

fn check_cores(k: f64) -> Result<(), SpeedupError> {
    if k >= 1.0 && k.is_finite() {
        Ok(())
    } else {
        Err(SpeedupError::BelowOneCore(k))
    }
}

impl SpeedupFunction {
    pub fn power(p: f64) -> Result<Self, SpeedupError> {
        if p > 0.0 && p < 1.0 {
            Ok(SpeedupFunction::Power { p })
        } else {
            Err(SpeedupError::InvalidParameter(format!("power-law exponent {p} not in (0, 1)")))
        }
    }

    pub fn amdahl(sigma: f64) -> Result<Self, SpeedupError> {
        if sigma > 0.0 && sigma < 1.0 {
            Ok(SpeedupFunction::Amdahl { sigma })
        } else {
            Err(SpeedupError::InvalidParameter(format!("sequential fraction {sigma} not in (0, 1)")))
        }
    }

    /// Piecewise-linear interpolation of `(k, s)` knots; rejected if any axiom fails.
    pub fn table(knots: &[[f64; 2]]) -> Result<Self, SpeedupError> {
        Tabulated::new(knots).map(SpeedupFunction::Table)
    }

    /// True for the families with `s'' < 0` on `k > 1`.
    pub fn is_strictly_concave(&self) -> bool {
        !matches!(self, SpeedupFunction::Table(_))
    }

    pub fn eval(&self, k: f64) -> Result<f64, SpeedupError> {
        check_cores(k)?;
        Ok(self.value(k))
    }

    /// `s(k)` without the domain check. Callers guarantee `k >= 1`.
    #[inline]
    pub fn value(&self, k: f64) -> f64 {
        match self {
            SpeedupFunction::Power { p } => k.powf(*p),
            SpeedupFunction::Amdahl { sigma } => k / (sigma * k + 1.0 - sigma),
            SpeedupFunction::Table(t) => t.value(k),
        }
    }

    /// Right derivative at `k = 1`, ordinary derivative elsewhere.
    pub fn deriv(&self, k: f64) -> Result<f64, SpeedupError> {
        check_cores(k)?;
        Ok(self.slope(k))
    }

    #[inline]
    fn slope(&self, k: f64) -> f64 {
        match self {
            SpeedupFunction::Power { p } => p * k.powf(p - 1.0),
            SpeedupFunction::Amdahl { sigma } => {
                let d = sigma * k + 1.0 - sigma;
                (1.0 - sigma) / (d * d)
            }
            SpeedupFunction::Table(t) => {
                let h = TABLE_DIFF_STEP;
                if k - h < 1.0 {
                    (t.value(k + h) - t.value(k)) / h
                } else {
                    (t.value(k + h) - t.value(k - h)) / (2.0 * h)
                }
            }
        }
    }

    /// Penalty ratio `f(k) = s'(k) / (s(k) - k s'(k))`.
    pub fn whittle_f(&self, k: f64) -> Result<f64, SpeedupError> {
        check_cores(k)?;
        match self {
            SpeedupFunction::Power { p } => Ok(p / ((1.0 - p) * k)),
            SpeedupFunction::Amdahl { sigma } => Ok((1.0 - sigma) / (sigma * k * k)),
            SpeedupFunction::Table(_) => {
                let ds = self.slope(k);
                let denom = self.value(k) - k * ds;
                if denom <= ELASTIC_TOL {
                    Err(SpeedupError::PerfectlyElastic(k))
                } else {
                    Ok(ds / denom)
                }
            }
        }
    }

    /// `f(1)`, the price ratio at and above which a job wants a single core.
    pub fn f_at_one(&self) -> Result<f64, SpeedupError> {
        self.whittle_f(1.0)
    }

    /// Inverse of the penalty ratio on `(0, f(1)]`.
    pub fn whittle_f_inv(&self, y: f64) -> Result<f64, SpeedupError> {
        let max = self.f_at_one()?;
        if !(y > 0.0) || y > max * (1.0 + 1e-12) {
            return Err(SpeedupError::PenaltyOutOfRange { y, max });
        }
        match self {
            SpeedupFunction::Power { p } => Ok((p / ((1.0 - p) * y)).max(1.0)),
            // f(k) = (1 - sigma) / (sigma k^2)
            SpeedupFunction::Amdahl { sigma } => Ok(((1.0 - sigma) / (sigma * y)).sqrt().max(1.0)),
            SpeedupFunction::Table(_) => self.whittle_f_inv_bisect(y),
        }
    }

    /// Inverts `f` by bisection on `[1, k_hi]`, doubling `k_hi` until `f(k_hi) <= y`.
    ///
    /// Works for any family on which `f` is nonincreasing; for tabulated
    /// functions it returns the boundary knot of the step containing `y`.
    pub fn whittle_f_inv_bisect(&self, y: f64) -> Result<f64, SpeedupError> {
        let max = self.f_at_one()?;
        if !(y > 0.0) || y > max * (1.0 + 1e-12) {
            return Err(SpeedupError::PenaltyOutOfRange { y, max });
        }
        let f = |k: f64| self.whittle_f(k).unwrap_or(f64::INFINITY);
        if f(1.0) <= y {
            return Ok(1.0);
        }
        let mut hi = 2.0;
        while f(hi) > y {
            hi *= 2.0;
            if hi > MAX_CORES {
                return Err(SpeedupError::UnboundedDemand(y));
            }
        }
        let (_, k) = roots::bisect(1.0, hi, 1e-15, 200, |k| f(k) <= y);
        Ok(k)
    }

    /// Cores demanded by a job with holding cost `c` at service price `ell`.
    pub fn g(&self, c: f64, ell: f64) -> Result<f64, SpeedupError> {
        let y = ell / c;
        if y >= self.f_at_one()? {
            Ok(1.0)
        } else {
            self.whittle_f_inv(y)
        }
    }

    /// Cores at which the marginal speedup equals `theta`, floored at one core.
    ///
    /// `theta` must be positive. Used by the GREEDY baseline.
    pub fn marginal_demand(&self, theta: f64) -> f64 {
        match self {
            SpeedupFunction::Power { p } => (theta / p).powf(1.0 / (p - 1.0)).max(1.0),
            SpeedupFunction::Amdahl { sigma } => {
                (((1.0 - sigma) / theta).sqrt() - (1.0 - sigma)) / sigma
            }
            .max(1.0),
            SpeedupFunction::Table(t) => {
                // s' is a step function; the demand is the knot where slopes drop to theta
                let mut k = 1.0;
                for j in 1..t.ks.len() {
                    let slope = (t.ss[j] - t.ss[j - 1]) / (t.ks[j] - t.ks[j - 1]);
                    if slope > theta {
                        k = t.ks[j];
                    } else {
                        break;
                    }
                }
                k
            }
        }
    }

    /// Largest marginal speedup, attained at `k = 1`.
    pub fn max_marginal(&self) -> f64 {
        self.slope(1.0)
    }

    /// Core-seconds `k x / s(k)` consumed running work `x` on `k` cores.
    pub fn effective_work(&self, x: f64, k: f64) -> Result<f64, SpeedupError> {
        check_cores(k)?;
        Ok(k * x / self.value(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numeric_deriv(s: &SpeedupFunction, k: f64) -> f64 {
        let h = 1e-6;
        (s.value(k + h) - s.value(k)) / h
    }

    #[test]
    fn eval_examples() {
        let pw = SpeedupFunction::power(0.5).unwrap();
        let am = SpeedupFunction::amdahl(0.2).unwrap();
        assert_eq!(pw.eval(4.0).unwrap(), 2.0);
        assert_eq!(am.eval(1.0).unwrap(), 1.0);
        assert!((am.eval(1e6).unwrap() - 5.0).abs() < 1e-3);
        assert!(matches!(pw.eval(0.5), Err(SpeedupError::BelowOneCore(_))));
    }

    #[test]
    fn deriv_examples() {
        let pw = SpeedupFunction::power(0.5).unwrap();
        assert!((pw.deriv(4.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((SpeedupFunction::power(0.3).unwrap().deriv(1.0).unwrap() - 0.3).abs() < 1e-15);
        let am = SpeedupFunction::amdahl(0.2).unwrap();
        let d = am.deriv(1.0).unwrap();
        assert!((d - 0.8).abs() < 1e-12);
        assert!((d - numeric_deriv(&am, 1.0)).abs() < 1e-6);
        assert!(am.deriv(0.99).is_err());
    }

    #[test]
    fn whittle_f_examples() {
        let pw = SpeedupFunction::power(0.5).unwrap();
        // oracle: s'/(s - k s') from the derivative
        let oracle = |s: &SpeedupFunction, k: f64| {
            let d = s.deriv(k).unwrap();
            d / (s.value(k) - k * d)
        };
        assert!((pw.whittle_f(4.0).unwrap() - 0.25).abs() < 1e-10);
        assert!((pw.whittle_f(4.0).unwrap() - oracle(&pw, 4.0)).abs() < 1e-10);
        let p3 = SpeedupFunction::power(0.3).unwrap();
        assert!((p3.whittle_f(1.0).unwrap() - 3.0 / 7.0).abs() < 1e-10);
        assert!((p3.whittle_f(1.0).unwrap() - oracle(&p3, 1.0)).abs() < 1e-10);
        let am = SpeedupFunction::amdahl(0.2).unwrap();
        assert!((am.whittle_f(1.0).unwrap() - 4.0).abs() < 1e-10);
        let nd = numeric_deriv(&am, 1.0);
        assert!((nd / (1.0 - nd) - 4.0).abs() < 1e-4);
    }

    #[test]
    fn whittle_f_inv_examples() {
        let pw = SpeedupFunction::power(0.5).unwrap();
        assert!((pw.whittle_f_inv(0.25).unwrap() - 4.0).abs() < 1e-12);
        let p3 = SpeedupFunction::power(0.3).unwrap();
        assert!((p3.whittle_f_inv(3.0 / 7.0).unwrap() - 1.0).abs() < 1e-12);
        let am = SpeedupFunction::amdahl(0.2).unwrap();
        assert!((am.whittle_f_inv(4.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(pw.whittle_f_inv(1.5), Err(SpeedupError::PenaltyOutOfRange { .. })));
        assert!(pw.whittle_f_inv(0.0).is_err());
        assert!(pw.whittle_f_inv(-1.0).is_err());
    }

    #[test]
    fn closed_form_inverse_matches_bisection() {
        for s in [
            SpeedupFunction::power(0.3).unwrap(),
            SpeedupFunction::power(0.8).unwrap(),
            SpeedupFunction::amdahl(0.2).unwrap(),
            SpeedupFunction::amdahl(0.05).unwrap(),
        ] {
            let fmax = s.f_at_one().unwrap();
            for frac in [1.0, 0.5, 0.1, 1e-3, 1e-6] {
                let y = fmax * frac;
                let a = s.whittle_f_inv(y).unwrap();
                let b = s.whittle_f_inv_bisect(y).unwrap();
                assert!((a - b).abs() <= 1e-10 * a, "{s:?} y={y}: {a} vs {b}");
                let back = s.whittle_f(a).unwrap();
                assert!((back - y).abs() <= 1e-10 * y);
            }
        }
    }

    #[test]
    fn g_examples() {
        let pw = SpeedupFunction::power(0.5).unwrap();
        assert_eq!(pw.g(1.0, 2.0).unwrap(), 1.0);
        let k = pw.g(1.0, 0.5).unwrap();
        assert!((k - 2.0).abs() < 1e-12);
        assert!((pw.whittle_f(2.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((pw.g(2.0, 0.5).unwrap() - 4.0).abs() < 1e-12);
        assert!(pw.g(1.0, 0.0).is_err());
    }

    #[test]
    fn table_rejects_axiom_violations() {
        assert!(matches!(
            SpeedupFunction::table(&[[1.0, 1.0], [2.0, 3.0]]),
            Err(SpeedupError::Axiom(_))
        ));
        assert!(SpeedupFunction::table(&[[1.0, 1.0], [2.0, 1.2], [4.0, 3.0]]).is_err());
        assert!(SpeedupFunction::table(&[[1.0, 1.0], [2.0, 0.9]]).is_err());
        assert!(SpeedupFunction::table(&[[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]]).is_err());
        assert!(SpeedupFunction::table(&[[2.0, 1.0]]).is_err());
        let t = SpeedupFunction::table(&[[1.0, 1.0], [2.0, 1.8], [4.0, 3.0]]).unwrap();
        assert!((t.value(3.0) - 2.4).abs() < 1e-12);
        assert_eq!(t.value(100.0), 3.0);
        assert!(!t.is_strictly_concave());
    }

    #[test]
    fn table_inverse_lands_on_knots() {
        let t = SpeedupFunction::table(&[[1.0, 1.0], [2.0, 1.8], [4.0, 3.0]]).unwrap();
        // segment f values: 0.8/0.2 = 4 on [1,2], 0.6/0.6 = 1 on [2,4], 0 beyond
        let k = t.whittle_f_inv(2.0).unwrap();
        assert!((k - 2.0).abs() < 1e-5, "{k}");
        let k = t.whittle_f_inv(0.5).unwrap();
        assert!((k - 4.0).abs() < 1e-5, "{k}");
        assert_eq!(t.marginal_demand(0.7), 2.0);
        assert_eq!(t.marginal_demand(0.5), 4.0);
        assert_eq!(t.marginal_demand(0.9), 1.0);
    }

    #[test]
    fn serde_round_trip_validates() {
        let s: SpeedupFunction = serde_json::from_str(r#"{"type":"power","p":0.5}"#).unwrap();
        assert_eq!(s, SpeedupFunction::Power { p: 0.5 });
        let s: SpeedupFunction = serde_json::from_str(r#"{"type":"amdahl","sigma":0.2}"#).unwrap();
        assert_eq!(s, SpeedupFunction::Amdahl { sigma: 0.2 });
        let t: SpeedupFunction =
            serde_json::from_str(r#"{"type":"table","knots":[[1,1],[2,1.8]]}"#).unwrap();
        assert_eq!(serde_json::to_string(&t).unwrap(), r#"{"type":"table","knots":[[1.0,1.0],[2.0,1.8]]}"#);
        assert!(serde_json::from_str::<SpeedupFunction>(r#"{"type":"power","p":1.5}"#).is_err());
        assert!(serde_json::from_str::<SpeedupFunction>(r#"{"type":"table","knots":[[1,1],[2,3]]}"#).is_err());
    }

    fn smooth_family() -> impl Strategy<Value = SpeedupFunction> {
        prop_oneof![
            (0.02f64..0.98).prop_map(|p| SpeedupFunction::power(p).unwrap()),
            (0.02f64..0.98).prop_map(|s| SpeedupFunction::amdahl(s).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn f_strictly_decreasing(s in smooth_family(), a in 0.0f64..4.0, b in 0.0f64..4.0) {
            let (k1, k2) = (10f64.powf(a.min(b)), 10f64.powf(a.max(b)));
            prop_assume!(k2 > k1 * (1.0 + 1e-9));
            prop_assert!(s.whittle_f(k1).unwrap() > s.whittle_f(k2).unwrap());
        }

        #[test]
        fn f_round_trip(s in smooth_family(), a in 0.0f64..3.0) {
            let k = 10f64.powf(a);
            let back = s.whittle_f_inv(s.whittle_f(k).unwrap()).unwrap();
            prop_assert!((back - k).abs() <= 1e-8 * k);
        }

        #[test]
        fn power_closed_form(p in 0.02f64..0.98, a in 0.0f64..4.0) {
            let s = SpeedupFunction::power(p).unwrap();
            let k = 10f64.powf(a);
            let expect = p / ((1.0 - p) * k);
            let d = s.deriv(k).unwrap();
            let via_deriv = d / (s.value(k) - k * d);
            prop_assert!((via_deriv - expect).abs() <= 1e-10 * expect);
            prop_assert!((s.whittle_f(k).unwrap() - expect).abs() <= 1e-10 * expect);
        }

        #[test]
        fn g_nonincreasing(s in smooth_family(), c in 0.1f64..5.0, a in -4.0f64..2.0, b in -4.0f64..2.0) {
            let (l1, l2) = (10f64.powf(a.min(b)), 10f64.powf(a.max(b)));
            prop_assert!(s.g(c, l1).unwrap() >= s.g(c, l2).unwrap());
            let sat = c * s.f_at_one().unwrap();
            prop_assert_eq!(s.g(c, sat * (1.0 + 10f64.powf(a))).unwrap(), 1.0);
        }

        #[test]
        fn axioms_hold(s in smooth_family(), a in 0.0f64..4.0, b in 0.0f64..4.0) {
            let (k1, k2) = (10f64.powf(a.min(b)), 10f64.powf(a.max(b)));
            prop_assert!(s.value(k1) <= k1 * (1.0 + 1e-12));
            prop_assert!(s.value(k1) <= s.value(k2) + 1e-12);
            // k / s(k) nondecreasing
            prop_assert!(k1 / s.value(k1) <= k2 / s.value(k2) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn effective_work_examples() {
        let pw = SpeedupFunction::power(0.5).unwrap();
        assert_eq!(pw.effective_work(2.0, 4.0).unwrap(), 4.0);
        assert_eq!(pw.effective_work(2.0, 1.0).unwrap(), 2.0);
        let am = SpeedupFunction::amdahl(0.2).unwrap();
        assert!((am.effective_work(1.0, 10.0).unwrap() - 2.8).abs() < 1e-12);
    }
}
