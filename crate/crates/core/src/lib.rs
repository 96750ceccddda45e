//! Whittle index scheduling for multi-class, delay-aware channel allocation.
//!
//! `N` queues share `M < N` channels. Each slot a scheduled class-`k` queue
//! drains up to `R_k` packets, and every queue receives a uniform batch of
//! `0..R_k` arrivals. The crate provides:
//!
//! * [`model`]: classes, the single-queue dynamics and its transition kernels;
//! * [`stationary`]: closed-form stationary laws under threshold policies and
//!   the derived mean-cost / passive-time curves;
//! * [`whittle`]: Whittle indices (iterative algorithm and closed forms) and
//!   indexability certification;
//! * [`relaxed`]: the time-average-budget relaxation, its critical multiplier
//!   and the lower bound on the per-user cost;
//! * [`dp_oracle`]: small-scale relative value iteration used to certify the
//!   threshold structure;
//! * [`fluid`]: the affine fluid map around the relaxed optimum and its
//!   contraction rate;
//! * [`simulator`]: seeded Monte-Carlo simulation of the `N`-queue system.

pub mod dp_oracle;
pub mod error;
pub mod exact;
pub mod fluid;
pub mod model;
pub mod relaxed;
pub mod simulator;
pub mod stationary;
pub mod whittle;

pub use error::{Error, Result};
pub use model::{Action, ClassSpec, Kernel, SystemConfig};

pub use stationary::{CostCurve, Regime, StationaryDist};
pub use relaxed::RelaxedSolution;
pub use whittle::WhittleTable;

