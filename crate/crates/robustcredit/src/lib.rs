//! Robust optimization of defaultable-bond portfolios under contagion.
//!
//! The library prices coupon bonds in an interacting-intensity default model,
//! solves the default-state-indexed system of nonlinear HJB ODEs for the
//! time component `B_z(t)` of the value function `w_z(t,v) = U(v) B_z(t)`,
//! recovers the closed-form optimal allocations and worst-case intensity
//! tilts, and verifies the whole chain by Monte Carlo simulation of the
//! controlled wealth process.
//!
//! Modules follow the pipeline order:
//!
//! - [`model`]: market model ingestion and validation
//! - [`numerics`]: backward RK4, monotone inversion, segment-exact quadrature
//! - [`pricing`]: pre-default price recursion and depreciation matrices
//! - [`hjb`]: the recursive HJB solver (direct and fixed-point)
//! - [`policy`]: optimal fractions, jump exposures, worst-case multipliers
//! - [`montecarlo`]: contagion-chain simulation and martingale diagnostics
//! - [`sweep`]: comparative-statics sweeps
//! - [`check`]: the full invariant suite backing the `check` subcommand
//! - [`output`]: deterministic CSV rendering of all tables

pub mod check;
pub mod hjb;
pub mod model;
pub mod montecarlo;
pub mod numerics;
pub mod output;
pub mod policy;
pub mod pricing;
pub mod sweep;

pub use model::{load_model, DefaultState, MarketModel, TimeGrid};
pub use numerics::GridFunction;
