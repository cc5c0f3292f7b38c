//! Separated endogenous/exogenous world models for offline reinforcement
//! learning on tabular exogenous block MDPs.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`exbmdp`]: ground-truth factored MDPs, simulation and exact DP.
//! * [`datagen`]: behavior policies at three quality tiers and offline datasets.
//! * [`sepmodel`]: sampling schedules, partition discovery and ensemble fitting.
//! * [`penalize`]: ensemble uncertainty, penalized planning and evaluation.
//! * [`theory`]: exact numerical checks of the telescoping identity, the
//!   penalized performance bound and the sampling-likelihood inequality.
//! * [`harness`]: environment generation, stage artifacts and ablations used
//!   by the `exoplan` binary.

pub mod datagen;
pub mod exbmdp;
pub mod harness;
pub mod io;
pub mod penalize;
pub mod rng;
pub mod sepmodel;
pub mod theory;

pub use exbmdp::{ExBmdpSpec, LatentState, PolicyTable, TransitionTable};
