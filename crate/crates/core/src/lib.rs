//! Ensemble-based optimization (EnOpt) with adaptively trained neural-network
//! surrogates.
//!
//! The crate is organised bottom-up:
//!
//! * [`controls`]: control vectors, box constraints, projection and unit scaling.
//! * [`covariance`]: AR(1) initial covariance, rank-one adaptation, Gaussian sampling.
//! * [`objective`]: the black-box objective wrapper with evaluation accounting.
//! * [`enopt`]: ensemble gradient, line search, single optimization steps and the
//!   EnOpt loop.
//! * [`surrogate`]: feedforward networks, backpropagation, L-BFGS training with early
//!   stopping and restarts, scalar/vector surrogate objectives.
//! * [`aml`]: the adaptive machine-learning EnOpt outer/inner loop and trace certification.
//! * [`reservoir`]: a two-phase polymer-flooding proxy simulator, the NPV objective
//!   and cheap analytic benchmark objectives.

pub mod aml;
pub mod controls;
pub mod covariance;
pub mod enopt;
pub mod error;
pub mod objective;
pub mod reservoir;
pub mod rng;
pub mod surrogate;
pub mod trace;

pub use controls::{ControlBounds, ControlVector};
pub use covariance::{CovarianceMatrix, CovarianceState, PerturbationEnsemble};
pub use enopt::{enopt, EnOptConfig, ValueScaling};
pub use error::{Error, Result};
pub use objective::{Evaluation, Objective, ObjectiveFn};
pub use trace::{IterationTrace, Termination, TraceRecord};
