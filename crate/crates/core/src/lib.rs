//! Multi-point phase-contrast MRI velocity estimation: PRoM, baselines,
//! acquisition design, error analysis and simulation.

// `!(x > 0.0)` guards are meant to reject NaN too; index loops over 3x3
// matrices read better than iterator chains.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod analysis;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod congruence;
pub mod container;
pub mod covariance;
pub mod design;
pub mod error;
pub mod estimator;
pub mod measurement;
pub mod postprocess;
pub mod recipes;
pub mod rng;
pub mod simulation;
pub mod voxel;
