//! Simulation and verification of stochastic systems with a drift that jumps
//! across a switching surface.
//!
//! The drift is regularized by mollification ([`filippov`]), the regularized
//! system is integrated by Euler–Maruyama ([`sde`]) or, for the stochastic
//! heat equation, by a spectral-Galerkin scheme ([`spde`]), and Monte Carlo
//! reaching times are compared against the theoretical tail bound
//! ([`reaching`]). Sliding hypotheses of user systems are checked by dense
//! sampling ([`systems`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filippov;
pub mod reaching;
pub mod rng;
pub mod sde;
pub mod spde;
pub mod stats;
pub mod systems;

pub use error::{Error, Result};
pub use filippov::{
    filippov_interval, filippov_set, mollifier_eval, mollify_drift, phi_lambda_eval, yosida_sign,
    DriftEvaluation, FilippovSet, Interval, JumpDrift, LinearGrowth, MollifiedDrift, Mollifier, SmoothedAbs,
    SwitchedAffine,
};
pub use reaching::{
    default_band, empirical_tail, reaching_time, run_batch, run_spde_batch, supermartingale_batch,
    supermartingale_diagnostic, theoretical_tail_bound, verify_bound, BatchOptions, BoundSpec, BoundVerdict,
    ReachingStats,
};
pub use sde::{
    em_step, moment_statistics, simulate_path, wiener_block, NoiseBlock, SimGrid, Simulator, Trajectory,
};
pub use spde::{
    build_eigensystem, check_noise_regularity, simulate_coupled, simulate_spde, spde_step, Eigensystem,
    NoiseSpec, SpdeScenario, SpdeSimulator, SpectralField,
};
pub use systems::{
    build_second_order_system, certify_conditions, certify_spde_hypotheses, corollary_reach_probability,
    ConditionReport, Diffusion, Sigma0, SlidingSurface, StateBox, SystemSpec,
};
