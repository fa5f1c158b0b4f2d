//! Steady-state simulation of stable multiclass queueing networks with
//! control-variate estimators.
//!
//! The crate is `no_std` (it needs `alloc`). It contains the network model,
//! priority policies, the uniformized Markov chain, batch-means control-variate
//! output analysis, the quadratic and fluid-value-function controls, and a set
//! of independent oracles used for verification. File formats, the replication
//! harness and the command line live in the `netsim` crate.
//!
//! Classes and stations are 0-based throughout this crate. The companion crate
//! translates to 1-based ids at its file and report boundaries.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod chain;
pub mod cvcore;
mod error;
pub mod fluid;
pub mod linalg;
pub mod network;
pub mod oracle;
pub mod policy;
pub mod quadratic;
pub mod stats;

pub use chain::{run, Control, RngStream, RunAccumulator, RunOptions, Simulator};
pub use cvcore::{batch, loh_estimate, BatchSeries, EstimatorKind, EstimatorResult};
pub use error::Error;
pub use fluid::{fluid_drift, solve_fluid, FluidPath, FluidValueFn};
pub use network::{NetworkSpec, TrafficSolution, UniformizedNetwork};
pub use policy::{Allocation, Policy, PriorityPolicy};
pub use quadratic::QuadraticCv;

pub type Result<T, E = Error> = core::result::Result<T, E>;
