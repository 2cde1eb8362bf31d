//! Desk-scale full-order model: a two-phase polymer-flooding proxy, the NPV
//! objective, and analytic benchmarks.

pub mod analytic;
pub mod deck;
pub mod npv;
pub mod sim;

pub use analytic::{analytic_by_name, analytic_objectives, AnalyticKind, AnalyticObjective};
pub use deck::{ControlType, Deck, FieldSpec, GridSpec, WellKind, WellSpec};
pub use npv::{make_fom_objective, make_scaled_fom_objective, npv, production_table, EconParams, FomFn};
pub use sim::{simulate, SimulationResult, Simulator};
