//! Mean-field model of CSMA networks with random backoff, where users are
//! grouped into classes that interfere according to a class-level graph.
//!
//! The analytical modules ([`env`], [`meanfield`], [`stationary`]) are generic
//! over [`Real`]; the aliases below fix them to `f64`. The simulator ([`sim`])
//! works in `f64` only.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod env;
pub mod error;
pub mod linalg;
pub mod meanfield;
pub mod model;
pub mod scalar;
pub mod sim;
pub mod stationary;
pub mod sweep;

pub use env::{
    attempt_profile, build_kernel, build_kernel_capped, domination_check, ghi, stationary_dist, AttemptProfile,
    DominationReport, EnvKernel, EnvStationary, Ghi, KernelMode, StateSpace, Topology,
};
pub use error::{Error, Result};
pub use meanfield::{
    full_interference_rhs, integrate, integrate_with, mean_rates, ode_rhs, IntegrateOptions, MeanRates, Trajectory,
};
pub use model::{
    load_spec, load_spec_file, rho_of, validate_spec, BackoffPolicy, ClassMixture, NetworkSpec, RhoVector, SpecDocument,
};
pub use scalar::{fmt_sig12, round_sig12, Real};
pub use sim::{chaos_metric, occupation_check, simulate, SimConfig, SimReport, SimState};
pub use stationary::{
    closed_form_full_interference, exp_backoff_geometric, level_balance, solve_fixed_point, throughput,
    FixedPointResult, SolverOptions, ThroughputVector,
};
pub use sweep::{run_sweep, Method, SweepParam, SweepPlan, SweepRow};

pub type Spec = NetworkSpec<f64>;
pub type Mixture = ClassMixture<f64>;
pub type Rho = RhoVector<f64>;
pub type Kernel = EnvKernel<f64>;
pub type Stationary = EnvStationary<f64>;
pub type FixedPoint = FixedPointResult<f64>;
