//! Allocating a shared pool of cores across streams of malleable jobs.
//!
//! Jobs of each class arrive over time, carry a holding cost rate and run at
//! speed `s(k)` on `k` cores for a concave speedup curve `s`. The crate has
//! the allocation policies ([`policies`]), an exact event-driven simulator
//! ([`simulator`]), the relaxed problem whose optimum lower-bounds every
//! policy's cost ([`relaxopt`]) and the fluid model of the Whittle policy
//! ([`meanfield`]).

// comparisons are written negated so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod meanfield;
pub mod policies;
pub mod relaxopt;
pub mod roots;
pub mod simulator;
pub mod speedup;
pub mod workload;
