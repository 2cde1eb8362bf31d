//! Discounted net present value of a simulated schedule and the full-order
//! objective built on it.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::deck::Deck;
use super::sim::{SimulationResult, Simulator};
use crate::controls::ControlBounds;
use crate::error::{Error, Result};
use crate::objective::{Evaluation, Objective, ObjectiveFn, UnitCube};
use crate::surrogate::discount_vector;

/// Prices (USD/sm³ for fluids, USD/kg for polymer) and discounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EconParams {
    pub r_op: f64,
    pub r_gp: f64,
    pub r_wi: f64,
    pub r_wp: f64,
    pub r_pi: f64,
    pub r_pp: f64,
    /// Annual discount rate.
    pub d_tau: f64,
    /// Days per discounting period.
    pub tau: f64,
}

impl Default for EconParams {
    fn default() -> Self {
        Self { r_op: 500.0, r_gp: 0.15, r_wi: 30.0, r_wp: 30.0, r_pi: 2.5, r_pp: 0.5, d_tau: 0.1, tau: 365.0 }
    }
}

impl EconParams {
    pub fn validate(&self) -> Result<()> {
        let prices = [self.r_op, self.r_gp, self.r_wi, self.r_wp, self.r_pi, self.r_pp];
        if prices.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("economic prices must be finite and non-negative".into()));
        }
        if !(self.d_tau >= 0.0) || !(self.tau > 0.0) || !self.d_tau.is_finite() || !self.tau.is_finite() {
            return Err(Error::Config(format!("need d_tau >= 0 and tau > 0, got {} and {}", self.d_tau, self.tau)));
        }
        Ok(())
    }

    /// Undiscounted cash flow of one step.
    pub fn cash_flow(&self, q_op: f64, q_gp: f64, q_wi: f64, q_wp: f64, q_pi: f64, q_pp: f64) -> f64 {
        self.r_op * q_op + self.r_gp * q_gp - (self.r_wi * q_wi + self.r_wp * q_wp + self.r_pi * q_pi + self.r_pp * q_pp)
    }
}

/// Returns `(J, j)` with `J = δᵀ j`.
pub fn npv(result: &SimulationResult, econ: &EconParams) -> Result<(f64, Vec<f64>)> {
    let j = step_cash_flows(result, econ);
    let delta = discount_vector(econ.d_tau, econ.tau, &result.times_days)?;
    Ok((delta.iter().zip(&j).map(|(d, j)| d * j).sum(), j))
}

pub fn step_cash_flows(result: &SimulationResult, econ: &EconParams) -> Vec<f64> {
    (0..result.n_steps())
        .map(|i| {
            econ.cash_flow(result.q_op[i], result.q_gp[i], result.q_wi[i], result.q_wp[i], result.q_pi[i], result.q_pp[i])
        })
        .collect()
}

/// Column order of [`production_table`].
pub const PRODUCTION_COLUMNS: [&str; 7] = ["time_days", "Q_OP", "Q_WP", "Q_WI", "Q_PI", "Q_PP", "J_i"];

/// Tab-separated per-step totals with a header row.
pub fn production_table(result: &SimulationResult, econ: &EconParams) -> String {
    let j = step_cash_flows(result, econ);
    let mut s = PRODUCTION_COLUMNS.join("\t");
    s.push('\n');
    for i in 0..result.n_steps() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            result.times_days[i], result.q_op[i], result.q_wp[i], result.q_wi[i], result.q_pi[i], result.q_pp[i], j[i]
        );
    }
    s
}

/// Simulation plus NPV on physical controls.
pub struct FomFn {
    sim: Arc<Simulator>,
    econ: EconParams,
    delta: Vec<f64>,
}

impl FomFn {
    pub fn new(deck: Deck) -> Result<Self> {
        let econ = deck.economics.clone();
        let sched = &deck.schedule;
        let times: Vec<f64> = (1..=sched.n_steps).map(|i| sched.step_days * i as f64).collect();
        let delta = discount_vector(econ.d_tau, econ.tau, &times)?;
        Ok(Self { sim: Arc::new(Simulator::new(deck)?), econ, delta })
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }
}

impl ObjectiveFn for FomFn {
    fn dimension(&self) -> usize {
        self.sim.deck().n_controls()
    }

    fn call(&self, u: &[f64]) -> Result<Evaluation> {
        let deck = self.sim.deck();
        let u = crate::controls::ControlVector::new(u.to_vec(), deck.n_control_types(), deck.schedule.n_steps)?;
        let result = self.sim.simulate(&u).map_err(|e| Error::Evaluation(e.to_string()))?;
        let j = step_cash_flows(&result, &self.econ);
        let value = self.delta.iter().zip(&j).map(|(d, j)| d * j).sum();
        Ok(Evaluation { value, components: Some(j) })
    }

    fn discount(&self) -> Option<&[f64]> {
        Some(&self.delta)
    }
}

/// FOM objective on physical controls.
pub fn make_fom_objective(deck: &Deck) -> Result<Objective> {
    let name = format!("fom:{}", deck.name);
    Ok(Objective::new(name, FomFn::new(deck.clone())?))
}

/// FOM objective on the unit cube `[0, 1]^{N_u}`; controls are mapped to the
/// deck's bounds before simulation. Returns the objective and its unit bounds.
pub fn make_scaled_fom_objective(deck: &Deck) -> Result<(Objective, ControlBounds)> {
    let inner: Arc<dyn ObjectiveFn> = Arc::new(FomFn::new(deck.clone())?);
    let cube = UnitCube::new(inner, deck.control_bounds())?;
    Ok((Objective::new(format!("fom:{}", deck.name), cube), ControlBounds::unit(deck.n_control_types())))
}
