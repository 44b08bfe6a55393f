//! Bracketed bisection on monotone predicates.
//!
//! Every root-finding step in the crate (penalty-ratio inversion, market
//! clearing prices, fluid prices) is a search for the boundary of a monotone
//! predicate, so the primitive here takes a predicate rather than a function
//! value. Bisection is used throughout because several of the maps involved
//! are only piecewise smooth or have unbounded slope near their saturation
//! point.

/// Shrinks `[lo, hi]` around the switch point of a monotone predicate.
///
/// `upper(x)` must be `false` for `x` near `lo` and `true` for `x` near `hi`,
/// and switch at most once. Returns the final bracket `(lo, hi)` with
/// `upper(lo) == false` and `upper(hi) == true` (assuming that held on entry).
/// Stops when `hi - lo <= rel_tol * max(|hi|, tiny)` or after `max_iter` halvings.
pub fn bisect<F>(mut lo: f64, mut hi: f64, rel_tol: f64, max_iter: usize, mut upper: F) -> (f64, f64)
where
    F: FnMut(f64) -> bool,
{
    for _ in 0..max_iter {
        if hi - lo <= rel_tol * hi.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if upper(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

/// Same as [`bisect`] but halves in log space; `lo` and `hi` must be positive.
///
/// Prices span many orders of magnitude, so geometric midpoints converge in a
/// bounded number of steps regardless of the bracket's dynamic range.
pub fn bisect_log<F>(lo: f64, hi: f64, rel_tol: f64, max_iter: usize, mut upper: F) -> (f64, f64)
where
    F: FnMut(f64) -> bool,
{
    debug_assert!(lo > 0.0 && hi > lo);
    let (mut a, mut b) = (lo, hi);
    for _ in 0..max_iter {
        if b - a <= rel_tol * b {
            break;
        }
        let mid = (a * b).sqrt();
        if mid <= a || mid >= b {
            break;
        }
        if upper(mid) {
            b = mid;
        } else {
            a = mid;
        }
    }
    (a, b)
}
