//! Ensemble-based optimization (EnOpt).
//!
//! One optimization step samples `N` Gaussian perturbations around the current
//! control, estimates the covariance-preconditioned gradient by the
//! cross-covariance between perturbations and objective values, normalises it
//! in the max-norm and performs a backtracking line search with projection
//! onto the admissible box. The outer loop repeats steps while the objective
//! improves by more than the tolerance.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controls::{ControlBounds, ControlVector};
use crate::covariance::{sample_ensemble, CovarianceConfig, CovarianceState, PerturbationEnsemble};
use crate::error::{Error, Result};
use crate::objective::{Evaluation, Objective};
use crate::rng::derive_seed;
use crate::trace::{IterationTrace, Termination, TraceHeader, TraceRecord};

/// How objective differences are normalised before comparison with a tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ValueScaling {
    /// Compare raw differences.
    Raw,
    /// Divide by `max − min` over every value this run has evaluated so far.
    RunningRange,
    /// Divide by `max − min` of the objective over the most recent
    /// perturbation ensemble, i.e. the output range of the latest training set.
    EnsembleRange,
    /// Divide by a fixed positive constant.
    Fixed { scale: f64 },
}

impl Default for ValueScaling {
    fn default() -> Self {
        ValueScaling::Raw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnOptConfig {
    pub sample_size: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub initial_step: f64,
    pub step_contraction: f64,
    pub max_step_trials: usize,
    pub rng_seed: u64,
    pub covariance: CovarianceConfig,
    pub value_scaling: ValueScaling,
    /// Drop gradient components that push a control further into an active
    /// bound before normalising the direction.
    pub mask_active_bounds: bool,
}

impl Default for EnOptConfig {
    fn default() -> Self {
        Self {
            sample_size: 100,
            tolerance: 1e-6,
            max_iterations: 100,
            initial_step: 0.3,
            step_contraction: 0.5,
            max_step_trials: 10,
            rng_seed: 0,
            covariance: CovarianceConfig::default(),
            value_scaling: ValueScaling::Raw,
            mask_active_bounds: false,
        }
    }
}

impl EnOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 2 {
            return Err(Error::Parameter(format!("sample size must be at least 2, got {}", self.sample_size)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Parameter(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be positive".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::Parameter(format!("initial step must be positive, got {}", self.initial_step)));
        }
        if !(self.step_contraction > 0.0 && self.step_contraction < 1.0) {
            return Err(Error::Parameter(format!(
                "step contraction must lie in (0, 1), got {}",
                self.step_contraction
            )));
        }
        if let ValueScaling::Fixed { scale } = self.value_scaling {
            if !(scale > 0.0) {
                return Err(Error::Parameter(format!("fixed value scale must be positive, got {scale}")));
            }
        }
        Ok(())
    }
}

/// Zeroes components of `g` at a bound whose sign points out of the box.
pub fn mask_active_bounds(g: &mut [f64], u: &ControlVector, bounds: &ControlBounds) {
    for (i, (gi, ui)) in g.iter_mut().zip(u.values()).enumerate() {
        let w = u.well_of(i);
        if (*gi > 0.0 && *ui >= bounds.upper()[w]) || (*gi < 0.0 && *ui <= bounds.lower()[w]) {
            *gi = 0.0;
        }
    }
}

/// `(1/(N−1)) Σ_m (u_m − u)(F(u_m) − F(u))`.
pub fn cross_covariance(
    mean: &ControlVector,
    ensemble: &PerturbationEnsemble,
    values: &[f64],
    mean_value: f64,
) -> Result<Vec<f64>> {
    let n = ensemble.len();
    if n < 2 {
        return Err(Error::Parameter(format!("cross-covariance needs at least 2 samples, got {n}")));
    }
    if values.len() != n {
        return Err(Error::Shape(format!("{} values for {} ensemble members", values.len(), n)));
    }
    let mut acc = vec![0.0; mean.len()];
    for (member, &value) in ensemble.members.iter().zip(values) {
        if member.len() != mean.len() {
            return Err(Error::Shape("ensemble member length differs from mean".into()));
        }
        let df = value - mean_value;
        for ((a, m), u) in acc.iter_mut().zip(member.values()).zip(mean.values()) {
            *a += (m - u) * df;
        }
    }
    let denom = (n - 1) as f64;
    acc.iter_mut().for_each(|a| *a /= denom);
    Ok(acc)
}

/// Normalise to unit max-norm.
pub fn search_direction(ccov: &[f64]) -> Result<Vec<f64>> {
    let norm = ccov.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::StationaryEnsemble);
    }
    Ok(ccov.iter().map(|c| c / norm).collect())
}

/// One member of the data set produced by an optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub control: ControlVector,
    pub value: f64,
    pub components: Option<Vec<f64>>,
    /// The evaluation failed and `value` is the penalty substitute.
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct OptStepOutcome {
    pub next_control: ControlVector,
    pub next_value: f64,
    pub training_pairs: Vec<TrainingPair>,
    /// Objective evaluations spent in the line search.
    pub line_search_trials: usize,
    /// Ensemble members whose evaluation failed and received a penalty value.
    pub failed_members: usize,
}

/// Mutable state of one EnOpt run: evaluation cache, covariance, value scaling.
pub struct EnOptSession<'a> {
    objective: &'a Objective,
    bounds: &'a ControlBounds,
    config: &'a EnOptConfig,
    cache: HashMap<Vec<u64>, Evaluation>,
    covariance: CovarianceState,
    observed: Option<(f64, f64)>,
    ensemble_range: Option<(f64, f64)>,
    steps_taken: u64,
    stream: u64,
}

fn cache_key(u: &[f64]) -> Vec<u64> {
    u.iter().map(|v| v.to_bits()).collect()
}

impl<'a> EnOptSession<'a> {
    pub fn new(objective: &'a Objective, bounds: &'a ControlBounds, config: &'a EnOptConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            objective,
            bounds,
            config,
            cache: HashMap::new(),
            covariance: CovarianceState::new(config.covariance.clone()),
            observed: None,
            ensemble_range: None,
            steps_taken: 0,
            stream: 0,
        })
    }

    /// Start from an existing covariance state instead of building `C⁰`.
    pub fn with_covariance(mut self, state: CovarianceState) -> Self {
        self.covariance = state;
        self
    }

    /// Separate random stream, so nested runs never reuse perturbations.
    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn config(&self) -> &EnOptConfig {
        self.config
    }

    pub fn objective(&self) -> &Objective {
        self.objective
    }

    pub fn covariance(&self) -> &CovarianceState {
        &self.covariance
    }

    pub fn covariance_mut(&mut self) -> &mut CovarianceState {
        &mut self.covariance
    }

    fn observe(&mut self, v: f64) {
        self.observed = Some(match self.observed {
            None => (v, v),
            Some((lo, hi)) => (lo.min(v), hi.max(v)),
        });
    }

    /// Current divisor for value differences.
    pub fn value_scale(&self) -> f64 {
        match self.config.value_scaling {
            ValueScaling::Raw => 1.0,
            ValueScaling::Fixed { scale } => scale,
            ValueScaling::RunningRange => match self.observed {
                Some((lo, hi)) if hi > lo => hi - lo,
                _ => 1.0,
            },
            ValueScaling::EnsembleRange => match self.ensemble_range {
                Some((lo, hi)) if hi > lo => hi - lo,
                _ => 1.0,
            },
        }
    }

    /// `new > old + tol` on scaled values.
    pub fn improves(&self, new: f64, old: f64, tol: f64) -> bool {
        (new - old) / self.value_scale() > tol
    }

    /// Cached full evaluation. Only cache misses reach the objective.
    pub fn evaluation(&mut self, u: &ControlVector) -> Result<Evaluation> {
        let key = cache_key(u.values());
        if let Some(e) = self.cache.get(&key) {
            return Ok(e.clone());
        }
        let e = self.objective.evaluate_full(u.values())?;
        self.observe(e.value);
        self.cache.insert(key, e.clone());
        Ok(e)
    }

    pub fn value(&mut self, u: &ControlVector) -> Result<f64> {
        self.evaluation(u).map(|e| e.value)
    }

    pub fn is_cached(&self, u: &ControlVector) -> bool {
        self.cache.contains_key(&cache_key(u.values()))
    }

    /// Backtracking line search with tolerance `ε` from the configuration.
    /// Returns the last trial point even if it does not improve.
    pub fn line_search(&mut self, u_k: &ControlVector, value_k: f64, direction: &[f64]) -> Result<(ControlVector, f64, usize)> {
        if direction.len() != u_k.len() {
            return Err(Error::Shape("direction length differs from control".into()));
        }
        let cfg = self.config;
        let trial = |beta: f64| -> Result<ControlVector> {
            let moved = u_k.values().iter().zip(direction).map(|(u, d)| u + beta * d).collect();
            u_k.with_values(moved)?.project(self.bounds)
        };
        let mut beta = cfg.initial_step;
        let mut next = trial(beta)?;
        let mut next_value = self.value(&next)?;
        let mut trials = 1;
        let mut nu = 0;
        while !self.improves(next_value, value_k, cfg.tolerance) && nu < cfg.max_step_trials {
            beta *= cfg.step_contraction;
            next = trial(beta)?;
            next_value = self.value(&next)?;
            trials += 1;
            nu += 1;
        }
        Ok((next, next_value, trials))
    }

    /// Evaluate ensemble members concurrently; failures get the ensemble
    /// minimum minus one scaled unit.
    fn evaluate_ensemble(&mut self, ensemble: &PerturbationEnsemble) -> Result<(Vec<Evaluation>, Vec<bool>)> {
        let objective = self.objective;
        let results: Vec<Result<Evaluation>> = ensemble
            .members
            .par_iter()
            .map(|m| objective.evaluate_full(m.values()))
            .collect();
        let mut ok_min = f64::INFINITY;
        let mut ok_max = f64::NEG_INFINITY;
        for e in results.iter().flatten() {
            self.observe(e.value);
            ok_min = ok_min.min(e.value);
            ok_max = ok_max.max(e.value);
        }
        if ok_min <= ok_max {
            self.ensemble_range = Some((ok_min, ok_max));
        }
        let failed: Vec<bool> = results.iter().map(|r| r.is_err()).collect();
        if failed.iter().all(|f| *f) {
            let first = results.into_iter().find_map(|r| r.err()).expect("at least one failure");
            return Err(Error::Evaluation(format!("every ensemble member failed; first error: {first}")));
        }
        let penalty = ok_min - self.value_scale();
        let mut evals = Vec::with_capacity(results.len());
        for (m, r) in ensemble.members.iter().zip(results) {
            let e = match r {
                Ok(e) => {
                    self.cache.insert(cache_key(m.values()), e.clone());
                    e
                }
                Err(err) => {
                    log::warn!("ensemble member evaluation failed ({err}); assigning penalty value {penalty:e}");
                    Evaluation::scalar(penalty)
                }
            };
            evals.push(e);
        }
        Ok((evals, failed))
    }

    /// Single optimization step from `u_k`.
    pub fn opt_step(&mut self, u_k: &ControlVector) -> Result<OptStepOutcome> {
        if !u_k.is_feasible(self.bounds) {
            return Err(Error::Precondition("optimization step must start from an admissible control".into()));
        }
        let value_k = self.value(u_k)?;
        let seed = derive_seed(self.config.rng_seed, &[self.stream, self.steps_taken]);
        let cov = self.covariance.prepare(u_k.n_wells(), u_k.n_steps())?;
        let ensemble = sample_ensemble(u_k, cov, self.config.sample_size, self.bounds, seed)?;
        self.steps_taken += 1;
        let (evals, failed) = self.evaluate_ensemble(&ensemble)?;
        let failed_members = failed.iter().filter(|f| **f).count();
        let values: Vec<f64> = evals.iter().map(|e| e.value).collect();
        let mut ccov = cross_covariance(u_k, &ensemble, &values, value_k)?;
        if self.config.mask_active_bounds {
            mask_active_bounds(&mut ccov, u_k, self.bounds);
        }
        let direction = search_direction(&ccov)?;
        let (next_control, next_value, line_search_trials) = self.line_search(u_k, value_k, &direction)?;
        let step = next_control.values().iter().zip(u_k.values()).map(|(a, b)| a - b).collect();
        self.covariance.record_step(step);
        let training_pairs = ensemble
            .members
            .into_iter()
            .zip(evals)
            .zip(failed)
            .map(|((control, e), failed)| TrainingPair { control, value: e.value, components: e.components, failed })
            .collect();
        Ok(OptStepOutcome { next_control, next_value, training_pairs, line_search_trials, failed_members })
    }
}

/// Line search from a fresh session (no cached values besides `F(u_k)`).
pub fn line_search(
    objective: &Objective,
    u_k: &ControlVector,
    direction: &[f64],
    config: &EnOptConfig,
    bounds: &ControlBounds,
) -> Result<ControlVector> {
    let mut session = EnOptSession::new(objective, bounds, config)?;
    let value_k = session.value(u_k)?;
    session.line_search(u_k, value_k, direction).map(|(u, _, _)| u)
}

/// Single optimization step with an externally owned covariance state.
/// `iteration` selects the random stream.
pub fn opt_step(
    objective: &Objective,
    u_k: &ControlVector,
    iteration: usize,
    config: &EnOptConfig,
    bounds: &ControlBounds,
    covariance: &mut CovarianceState,
) -> Result<OptStepOutcome> {
    let mut session = EnOptSession::new(objective, bounds, config)?
        .with_covariance(covariance.clone())
        .with_stream(iteration as u64);
    let outcome = session.opt_step(u_k)?;
    *covariance = session.covariance.clone();
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct EnOptResult {
    /// Last iterate `u_k`, returned even if the final step did not improve.
    pub control: ControlVector,
    pub value: f64,
    /// Number of optimization steps performed.
    pub iterations: usize,
    pub trace: IterationTrace,
}

/// Runs the EnOpt loop on an existing session.
pub fn run_session(session: &mut EnOptSession<'_>, u0: &ControlVector, algorithm: &str) -> Result<EnOptResult> {
    if !u0.is_feasible(session.bounds) {
        return Err(Error::Precondition("initial control must be admissible".into()));
    }
    let cfg = session.config;
    let objective = session.objective;
    let start = Instant::now();
    let start_evals = objective.evaluations();
    let mut trace = IterationTrace::new(TraceHeader {
        algorithm: algorithm.into(),
        objective: objective.name().into(),
        dimension: u0.len(),
        tolerance: cfg.tolerance,
        inner_tolerance: None,
        max_iterations: cfg.max_iterations,
        max_inner_iterations: None,
        sample_size: cfg.sample_size,
        seed: cfg.rng_seed,
    });
    let record = |trace: &mut IterationTrace, k: usize, u: &ControlVector, v: f64, scale: f64, accepted: bool| {
        trace.push(TraceRecord {
            iteration: k,
            control: u.values().to_vec(),
            fom_value: v,
            trial_value: None,
            surrogate_value: None,
            inner_iterations: 0,
            fom_evaluations: objective.evaluations() - start_evals,
            surrogate_evaluations: 0,
            value_scale: scale,
            trial_scale: None,
            accepted,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    };

    let prev = u0.clone();
    let mut prev_value = session.value(u0)?;
    record(&mut trace, 0, &prev, prev_value, session.value_scale(), true);

    let first = match session.opt_step(&prev) {
        Ok(o) => o,
        Err(Error::StationaryEnsemble) => {
            trace.termination = Termination::StationaryEnsemble;
            return Ok(EnOptResult { control: prev, value: prev_value, iterations: 0, trace });
        }
        Err(e) => return Err(e),
    };
    let mut current = first.next_control;
    let mut current_value = first.next_value;
    let mut k = 1;
    loop {
        let improved = session.improves(current_value, prev_value, cfg.tolerance);
        record(&mut trace, k, &current, current_value, session.value_scale(), improved);
        if !improved {
            trace.termination = Termination::Converged;
            break;
        }
        if k >= cfg.max_iterations {
            trace.termination = Termination::MaxIterations;
            break;
        }
        let outcome = match session.opt_step(&current) {
            Ok(o) => o,
            Err(Error::StationaryEnsemble) => {
                trace.termination = Termination::StationaryEnsemble;
                break;
            }
            Err(e) => return Err(e),
        };
        current = outcome.next_control;
        prev_value = std::mem::replace(&mut current_value, outcome.next_value);
        k += 1;
    }
    Ok(EnOptResult { control: current, value: current_value, iterations: k, trace })
}

/// EnOpt on `objective` from `u0`; returns the last iterate and the trace.
pub fn enopt(
    objective: &Objective,
    u0: &ControlVector,
    config: &EnOptConfig,
    bounds: &ControlBounds,
) -> Result<(ControlVector, IterationTrace)> {
    let mut session = EnOptSession::new(objective, bounds, config)?;
    let result = run_session(&mut session, u0, "fom-enopt")?;
    Ok((result.control, result.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::build_initial_covariance;
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;

    fn cfg() -> EnOptConfig {
        EnOptConfig {
            sample_size: 20,
            tolerance: 1e-8,
            max_iterations: 50,
            initial_step: 0.3,
            step_contraction: 0.5,
            max_step_trials: 10,
            rng_seed: 42,
            covariance: CovarianceConfig { sigmas: vec![0.01], rho: 0.5, mixing: 0.1 },
            value_scaling: ValueScaling::Raw,
            mask_active_bounds: false,
        }
    }

    fn cv(v: &[f64], nw: usize) -> ControlVector {
        ControlVector::new(v.to_vec(), nw, v.len() / nw).unwrap()
    }

    #[test]
    fn constant_objective_has_zero_cross_covariance() {
        let mean = cv(&[0.5, 0.5], 2);
        let ens = PerturbationEnsemble { members: vec![cv(&[0.4, 0.6], 2), cv(&[0.7, 0.1], 2), cv(&[0.2, 0.2], 2)], mean: mean.clone() };
        let c = cross_covariance(&mean, &ens, &[3.0, 3.0, 3.0], 3.0).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn symmetric_pair_by_hand() {
        let g = [2.0, -1.0, 0.5];
        let v = [0.1, 0.2, -0.3];
        let mean = cv(&[0.5, 0.5, 0.5], 3);
        let plus: Vec<f64> = mean.values().iter().zip(&v).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = mean.values().iter().zip(&v).map(|(a, b)| a - b).collect();
        let f = |u: &[f64]| u.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let ens = PerturbationEnsemble { members: vec![cv(&plus, 3), cv(&minus, 3)], mean: mean.clone() };
        let c = cross_covariance(&mean, &ens, &[f(&plus), f(&minus)], f(mean.values())).unwrap();
        let gv: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        for (ci, vi) in c.iter().zip(&v) {
            assert!((ci - 2.0 * gv * vi).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_covariance_needs_two_members() {
        let mean = cv(&[0.5], 1);
        let ens = PerturbationEnsemble { members: vec![cv(&[0.4], 1)], mean: mean.clone() };
        assert!(matches!(cross_covariance(&mean, &ens, &[1.0], 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn direction_examples() {
        assert_eq!(search_direction(&[2.0, -4.0, 1.0]).unwrap(), vec![0.5, -1.0, 0.25]);
        assert_eq!(search_direction(&[-3.0; 4]).unwrap(), vec![-1.0; 4]);
        assert_eq!(search_direction(&[7.0; 3]).unwrap(), vec![1.0; 3]);
        assert!(matches!(search_direction(&[0.0; 3]), Err(Error::StationaryEnsemble)));
    }

    #[test]
    fn line_search_accepts_first_trial_on_increasing_objective() {
        let f = Objective::from_fn("lin", 2, |u| u[0] + u[1]);
        let b = ControlBounds::unit(2);
        let u = cv(&[0.2, 0.3], 2);
        let next = line_search(&f, &u, &[1.0, 0.5], &cfg(), &b).unwrap();
        assert!((next.values()[0] - 0.5).abs() < 1e-15 && (next.values()[1] - 0.45).abs() < 1e-15);
        assert_eq!(f.evaluations(), 2);
    }

    #[test]
    fn line_search_on_constant_objective_exhausts_trials() {
        let f = Objective::from_fn("const", 2, |_| 1.0);
        let b = ControlBounds::unit(2);
        let u = cv(&[0.2, 0.3], 2);
        let c = cfg();
        let next = line_search(&f, &u, &[1.0, -1.0], &c, &b).unwrap();
        let beta = 0.3 * 0.5_f64.powi(10);
        assert!((beta - 2.9296875e-4).abs() < 1e-18);
        assert!((next.values()[0] - (0.2 + beta)).abs() < 1e-15);
        assert!((next.values()[1] - (0.3 - beta)).abs() < 1e-15);
        assert_eq!(f.evaluations(), 1 + 11);
    }

    #[test]
    fn line_search_projects_trials() {
        let f = Objective::from_fn("lin", 1, |u| u[0]);
        let next = line_search(&f, &cv(&[0.9], 1), &[1.0], &cfg(), &ControlBounds::unit(1)).unwrap();
        assert_eq!(next.values(), &[1.0]);
    }

    fn bowl(center: Vec<f64>) -> Objective {
        let n = center.len();
        Objective::from_fn("bowl", n, move |u| -u.iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }

    #[test]
    fn opt_step_ascends_and_accounts_evaluations() {
        let f = bowl(vec![0.6, 0.4, 0.7, 0.3]);
        let b = ControlBounds::unit(2);
        let c = cfg();
        let u = cv(&[0.1, 0.9, 0.2, 0.8], 2);
        let mut session = EnOptSession::new(&f, &b, &c).unwrap();
        let out = session.opt_step(&u).unwrap();
        assert!(out.next_value > f.evaluate(u.values()).unwrap());
        assert_eq!(f.evaluations(), 1 + 20 + out.line_search_trials as u64 + 1);
        assert_eq!(out.training_pairs.len(), 20);
        for p in &out.training_pairs {
            assert_eq!(f.evaluate(p.control.values()).unwrap(), p.value);
        }
        // Mean already cached for the second step.
        let before = f.evaluations();
        let out2 = session.opt_step(&out.next_control).unwrap();
        assert_eq!(f.evaluations() - before, 20 + out2.line_search_trials as u64);
    }

    #[test]
    fn stationary_ensemble_is_reported() {
        let f = Objective::from_fn("const", 2, |_| 4.0);
        let b = ControlBounds::unit(2);
        let c = cfg();
        let (u, trace) = enopt(&f, &cv(&[0.5, 0.5], 2), &c, &b).unwrap();
        assert_eq!(u.values(), &[0.5, 0.5]);
        assert_eq!(trace.termination, Termination::StationaryEnsemble);
    }

    #[test]
    fn enopt_is_monotone_and_deterministic() {
        let f = bowl(vec![0.6, 0.4, 0.7, 0.3]);
        let b = ControlBounds::unit(2);
        let c = cfg();
        let u0 = cv(&[0.1, 0.9, 0.2, 0.8], 2);
        let (u, trace) = enopt(&f, &u0, &c, &b).unwrap();
        let n = trace.records.len();
        for w in trace.records[..n].windows(2).take(n.saturating_sub(2)) {
            assert!(w[1].fom_value > w[0].fom_value + c.tolerance);
        }
        assert!(trace.records.iter().all(|r| r.control.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(trace.total_fom_evaluations(), f.evaluations());
        assert_eq!(u.values(), trace.records.last().unwrap().control.as_slice());

        let g = bowl(vec![0.6, 0.4, 0.7, 0.3]);
        let (_, trace2) = enopt(&g, &u0, &c, &b).unwrap();
        let (mut a, mut bb) = (Vec::new(), Vec::new());
        trace.write_jsonl(&mut a).unwrap();
        trace2.write_jsonl(&mut bb).unwrap();
        assert_eq!(a, bb);
    }

    #[test]
    fn huge_tolerance_stops_after_one_step() {
        let f = bowl(vec![0.6, 0.4]);
        let b = ControlBounds::unit(1);
        let c = EnOptConfig { tolerance: 1e6, ..cfg() };
        let (_, trace) = enopt(&f, &cv(&[0.1, 0.9], 1), &c, &b).unwrap();
        assert_eq!(trace.records.len(), 2);
        assert_eq!(trace.termination, Termination::Converged);
    }

    #[test]
    fn max_iterations_is_a_flag_not_an_error() {
        let f = bowl(vec![0.6, 0.4]);
        let b = ControlBounds::unit(1);
        let c = EnOptConfig { max_iterations: 2, ..cfg() };
        let (_, trace) = enopt(&f, &cv(&[0.0, 1.0], 1), &c, &b).unwrap();
        assert_eq!(trace.termination, Termination::MaxIterations);
        assert_eq!(trace.records.len(), 3);
    }

    #[test]
    fn direction_is_invariant_to_positive_scaling() {
        let c = [0.3, -1.7, 0.2];
        let scaled: Vec<f64> = c.iter().map(|v| v * 37.5).collect();
        let (a, b) = (search_direction(&c).unwrap(), search_direction(&scaled).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn failed_members_receive_penalty() {
        let calls = Arc::new(AtomicU64::new(0));
        let calls2 = calls.clone();
        struct Flaky(Arc<AtomicU64>);
        impl crate::objective::ObjectiveFn for Flaky {
            fn dimension(&self) -> usize {
                2
            }
            fn call(&self, u: &[f64]) -> Result<Evaluation> {
                self.0.fetch_add(1, Ordering::SeqCst);
                if u[0] > 0.5 {
                    Err(Error::Simulation("boom".into()))
                } else {
                    Ok(Evaluation::scalar(u[0] + u[1]))
                }
            }
        }
        let f = Objective::new("flaky", Flaky(calls2));
        let b = ControlBounds::unit(2);
        let c = EnOptConfig { covariance: CovarianceConfig { sigmas: vec![0.2], rho: 0.0, mixing: 0.1 }, ..cfg() };
        let mut s = EnOptSession::new(&f, &b, &c).unwrap();
        let u = cv(&[0.5, 0.5], 2);
        let cov = build_initial_covariance(&[0.2, 0.2], 0.0, 2, 1).unwrap();
        let ens = sample_ensemble(&u, &cov, 20, &b, derive_seed(42, &[0, 0])).unwrap();
        let expected_failures = ens.members.iter().filter(|m| m.values()[0] > 0.5).count();
        assert!(expected_failures > 0);
        // Line search trials above 0.5 fail, so only check the ensemble bookkeeping.
        let _ = s.value(&u);
        let (evals, failed) = s.evaluate_ensemble(&ens).unwrap();
        assert_eq!(failed.iter().filter(|f| **f).count(), expected_failures);
        let ok_min = evals.iter().zip(&ens.members).filter(|(_, m)| m.values()[0] <= 0.5).map(|(e, _)| e.value).fold(f64::INFINITY, f64::min);
        for (e, m) in evals.iter().zip(&ens.members) {
            if m.values()[0] > 0.5 {
                assert!(e.value < ok_min);
            }
        }
        assert!(calls.load(Ordering::SeqCst) >= 21);
    }
}
