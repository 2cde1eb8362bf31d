//! Adaptive machine-learning EnOpt.
//!
//! The outer loop alternates single FOM optimization steps, which supply
//! training data and a FOM stationarity check, with full EnOpt runs on a
//! neural-network surrogate trained on the latest data. Candidates from the
//! surrogate run are accepted only after a FOM evaluation shows sufficient
//! increase.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceConfig;
use crate::controls::{ControlBounds, ControlVector};
use crate::enopt::{run_session, EnOptConfig, EnOptSession, OptStepOutcome, TrainingPair, ValueScaling};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::rng::derive_seed;
use crate::surrogate::{
    make_surrogate, train, Activation, NetworkArchitecture, SurrogateModel, SurrogateVariant, TrainerConfig,
    TrainingReport,
};
use crate::trace::{IterationTrace, Termination, TraceHeader, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    /// Network approximates `J` directly.
    DnnS,
    /// Network approximates the per-step values `j`; `J ≈ δᵀ Φ`.
    DnnV,
}

impl Construction {
    pub fn variant(self) -> SurrogateVariant {
        match self {
            Construction::DnnS => SurrogateVariant::Scalar,
            Construction::DnnV => SurrogateVariant::Vector,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Construction::DnnS => "aml-enopt-s",
            Construction::DnnV => "aml-enopt-v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmlConfig {
    /// ε_o, applied to FOM values scaled by the output range of the latest ensemble.
    pub outer_tolerance: f64,
    /// ε_i, applied to surrogate values scaled by the training-data range.
    pub inner_tolerance: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub construction: Construction,
    pub trainer: TrainerConfig,
    pub arch_hidden: Vec<usize>,
    pub activation: Activation,
    /// Shared by outer FOM steps and inner surrogate runs; `tolerance` is the
    /// line-search ε of the FOM steps.
    pub enopt: EnOptConfig,
    /// Train on the union of all FOM ensembles instead of the latest one.
    pub accumulate_data: bool,
}

impl Default for AmlConfig {
    fn default() -> Self {
        Self {
            outer_tolerance: 1e-2,
            inner_tolerance: 1e-6,
            max_outer: 50,
            max_inner: 100,
            construction: Construction::DnnS,
            trainer: TrainerConfig::default(),
            arch_hidden: vec![25, 25],
            activation: Activation::Tanh,
            enopt: EnOptConfig {
                value_scaling: ValueScaling::EnsembleRange,
                covariance: CovarianceConfig { sigmas: vec![0.001f64.sqrt()], ..CovarianceConfig::default() },
                ..EnOptConfig::default()
            },
            accumulate_data: true,
        }
    }
}

impl AmlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_tolerance > 0.0) || !(self.inner_tolerance > 0.0) {
            return Err(Error::Parameter("outer and inner tolerances must be positive".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Parameter("max_outer and max_inner must be positive".into()));
        }
        if self.arch_hidden.is_empty() || self.arch_hidden.contains(&0) {
            return Err(Error::Parameter("at least one non-empty hidden layer is required".into()));
        }
        self.trainer.validate()?;
        self.enopt.validate()?;
        if self.outer_tolerance < self.inner_tolerance {
            log::warn!(
                "outer tolerance {:e} is below inner tolerance {:e}; surrogate runs may stop before the FOM can certify progress",
                self.outer_tolerance,
                self.inner_tolerance
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AmlResult {
    pub control: ControlVector,
    pub value: f64,
    pub trace: IterationTrace,
    /// One report per trained surrogate, in outer-iteration order.
    pub training_reports: Vec<TrainingReport>,
    /// Surrogate used in the last outer iteration.
    pub last_model: Option<SurrogateModel>,
}

fn training_targets(pairs: &[TrainingPair], construction: Construction) -> Result<Vec<(ControlVector, Vec<f64>)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs.iter().filter(|p| !p.failed) {
        let target = match construction {
            Construction::DnnS => vec![p.value],
            Construction::DnnV => p.components.clone().ok_or_else(|| {
                Error::Config("vector surrogate needs per-step objective components in the training data".into())
            })?,
        };
        out.push((p.control.clone(), target));
    }
    Ok(out)
}

/// Runs the adaptive loop from `u0`; returns the final iterate and the trace.
pub fn aml_enopt(
    fom: &Objective,
    u0: &ControlVector,
    cfg: &AmlConfig,
    bounds: &ControlBounds,
) -> Result<(ControlVector, IterationTrace)> {
    aml_enopt_detailed(fom, u0, cfg, bounds).map(|r| (r.control, r.trace))
}

pub fn aml_enopt_detailed(fom: &Objective, u0: &ControlVector, cfg: &AmlConfig, bounds: &ControlBounds) -> Result<AmlResult> {
    cfg.validate()?;
    if !u0.is_feasible(bounds) {
        return Err(Error::Precondition("initial control must be admissible".into()));
    }
    let delta = match cfg.construction {
        Construction::DnnS => None,
        Construction::DnnV => Some(
            fom.discount()
                .ok_or_else(|| Error::Config(format!("objective '{}' exposes no per-step components", fom.name())))?
                .to_vec(),
        ),
    };
    let n_out = delta.as_ref().map_or(1, |d| d.len());
    let mut sizes = vec![u0.len()];
    sizes.extend(&cfg.arch_hidden);
    sizes.push(n_out);
    let arch = NetworkArchitecture::new(sizes, cfg.activation)?;

    let start = Instant::now();
    let start_evals = fom.evaluations();
    let mut surrogate_evals = 0_u64;
    let mut trace = IterationTrace::new(TraceHeader {
        algorithm: cfg.construction.label().into(),
        objective: fom.name().into(),
        dimension: u0.len(),
        tolerance: cfg.outer_tolerance,
        inner_tolerance: Some(cfg.inner_tolerance),
        max_iterations: cfg.max_outer,
        max_inner_iterations: Some(cfg.max_inner),
        sample_size: cfg.enopt.sample_size,
        seed: cfg.enopt.rng_seed,
    });
    let mut reports = Vec::new();
    let mut last_model = None;

    let mut session = EnOptSession::new(fom, bounds, &cfg.enopt)?;
    let mut u_k = u0.clone();
    let mut value_k = session.value(&u_k)?;
    let mut step: OptStepOutcome = match session.opt_step(&u_k) {
        Ok(s) => s,
        Err(Error::StationaryEnsemble) => {
            trace.push(row(0, &u_k, value_k, None, None, 0, fom.evaluations() - start_evals, 0, session.value_scale(), None, true, &start));
            trace.termination = Termination::StationaryEnsemble;
            return Ok(AmlResult { control: u_k, value: value_k, trace, training_reports: reports, last_model });
        }
        Err(e) => return Err(e),
    };
    trace.push(row(
        0,
        &u_k,
        value_k,
        Some(step.next_value),
        None,
        0,
        fom.evaluations() - start_evals,
        0,
        session.value_scale(),
        Some(session.value_scale()),
        true,
        &start,
    ));
    let mut data = step.training_pairs.clone();

    let mut k = 0;
    loop {
        if !session.improves(step.next_value, value_k, cfg.outer_tolerance) {
            trace.termination = Termination::FomStationary;
            break;
        }
        if k >= cfg.max_outer {
            trace.termination = Termination::MaxIterations;
            break;
        }

        let raw = training_targets(&data, cfg.construction)?;
        let trainer = TrainerConfig { rng_seed: derive_seed(cfg.trainer.rng_seed, &[k as u64]), ..cfg.trainer.clone() };
        let (weights, report) = match train(&raw, &arch, &trainer, bounds) {
            Ok(r) => r,
            Err(e @ (Error::Training(_) | Error::Parameter(_))) => {
                log::error!("surrogate training failed at outer iteration {k}: {e}");
                trace.termination = Termination::Incomplete { reason: format!("training failed at {k}: {e}") };
                break;
            }
            Err(e) => return Err(e),
        };
        let scaling = report.output_scaling.clone();
        // Range of J over the training data: the scale of the inner tolerance.
        let j_values: Vec<f64> = match &delta {
            None => raw.iter().map(|(_, y)| y[0]).collect(),
            Some(d) => raw.iter().map(|(_, y)| y.iter().zip(d).map(|(a, b)| a * b).sum()).collect(),
        };
        let j_lo = j_values.iter().copied().fold(f64::INFINITY, f64::min);
        let j_hi = j_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let inner_scale = if j_hi > j_lo { j_hi - j_lo } else { 1.0 };
        reports.push(report);
        let model = SurrogateModel::new(weights.clone(), cfg.construction.variant(), delta.clone(), bounds, scaling.clone())?;
        let surrogate = make_surrogate(weights, cfg.construction.variant(), delta.clone(), bounds, scaling)?;
        last_model = Some(model);

        let inner_cfg = EnOptConfig {
            tolerance: cfg.inner_tolerance,
            max_iterations: cfg.max_inner,
            value_scaling: ValueScaling::Fixed { scale: inner_scale },
            ..cfg.enopt.clone()
        };
        let fom_before_inner = fom.evaluations();
        let mut inner = EnOptSession::new(&surrogate, bounds, &inner_cfg)?
            .with_covariance(session.covariance().clone())
            .with_stream(1 + k as u64);
        let inner_result = run_session(&mut inner, &u_k, "inner")?;
        debug_assert_eq!(fom.evaluations(), fom_before_inner);
        surrogate_evals += surrogate.evaluations();
        let candidate = inner_result.control;
        let inner_iterations = inner_result.iterations;

        let candidate_value = session.value(&candidate)?;
        let scale = session.value_scale();
        if !session.improves(candidate_value, value_k, cfg.outer_tolerance) {
            trace.push(row(
                k + 1,
                &candidate,
                candidate_value,
                None,
                Some(inner_result.value),
                inner_iterations,
                fom.evaluations() - start_evals,
                surrogate_evals,
                scale,
                None,
                false,
                &start,
            ));
            trace.termination = Termination::SurrogateStepRejected { iteration: k };
            break;
        }

        let moved: Vec<f64> = candidate.values().iter().zip(u_k.values()).map(|(a, b)| a - b).collect();
        session.covariance_mut().record_step(moved);
        step = match session.opt_step(&candidate) {
            Ok(s) => s,
            Err(Error::StationaryEnsemble) => {
                u_k = candidate;
                value_k = candidate_value;
                trace.push(row(
                    k + 1,
                    &u_k,
                    value_k,
                    None,
                    Some(inner_result.value),
                    inner_iterations,
                    fom.evaluations() - start_evals,
                    surrogate_evals,
                    scale,
                    None,
                    true,
                    &start,
                ));
                trace.termination = Termination::StationaryEnsemble;
                break;
            }
            Err(e) => return Err(e),
        };
        u_k = candidate;
        value_k = candidate_value;
        trace.push(row(
            k + 1,
            &u_k,
            value_k,
            Some(step.next_value),
            Some(inner_result.value),
            inner_iterations,
            fom.evaluations() - start_evals,
            surrogate_evals,
            scale,
            Some(session.value_scale()),
            true,
            &start,
        ));
        if cfg.accumulate_data {
            data.extend(step.training_pairs.iter().cloned());
        } else {
            data = step.training_pairs.clone();
        }
        k += 1;
    }
    Ok(AmlResult { control: u_k, value: value_k, trace, training_reports: reports, last_model })
}

#[allow(clippy::too_many_arguments)]
fn row(
    iteration: usize,
    u: &ControlVector,
    fom_value: f64,
    trial_value: Option<f64>,
    surrogate_value: Option<f64>,
    inner_iterations: usize,
    fom_evaluations: u64,
    surrogate_evaluations: u64,
    value_scale: f64,
    trial_scale: Option<f64>,
    accepted: bool,
    start: &Instant,
) -> TraceRecord {
    TraceRecord {
        iteration,
        control: u.values().to_vec(),
        fom_value,
        trial_value,
        surrogate_value,
        inner_iterations,
        fom_evaluations,
        surrogate_evaluations,
        value_scale,
        trial_scale,
        accepted,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub passed: bool,
    pub failures: Vec<String>,
    pub status: String,
    pub accepted_steps: usize,
    pub best_value: Option<f64>,
    pub best_control: Option<Vec<f64>>,
    pub final_value: Option<f64>,
    pub final_control: Option<Vec<f64>>,
    pub fom_evaluations: u64,
    pub surrogate_evaluations: u64,
}

/// Re-checks a finished trace: sufficient increase between consecutive
/// accepted rows, consistency of the termination status with the recorded
/// values, and monotone counters.
pub fn certify(trace: &IterationTrace) -> CertificationReport {
    let tol = trace.header.tolerance;
    let mut failures = Vec::new();
    let accepted: Vec<&TraceRecord> = trace.records.iter().filter(|r| r.accepted).collect();

    if trace.records.is_empty() {
        failures.push("trace has no rows".to_string());
    }
    if let Some(first) = trace.records.first() {
        if !first.accepted || first.iteration != 0 {
            failures.push("first row must be the accepted initial iterate".into());
        }
    }
    for w in accepted.windows(2) {
        let (a, b) = (w[0], w[1]);
        let gain = (b.fom_value - a.fom_value) / b.value_scale;
        if !(gain > tol) {
            failures.push(format!(
                "accepted step {} -> {} gains {:.3e} scaled, not more than tolerance {:.3e}",
                a.iteration, b.iteration, gain, tol
            ));
        }
    }
    for w in trace.records.windows(2) {
        if w[1].fom_evaluations < w[0].fom_evaluations || w[1].surrogate_evaluations < w[0].surrogate_evaluations {
            failures.push(format!("evaluation counters decrease at row {}", w[1].iteration));
        }
        if w[1].iteration < w[0].iteration {
            failures.push(format!("iteration index decreases at row {}", w[1].iteration));
        }
    }
    if let Some(max_inner) = trace.header.max_inner_iterations {
        for r in trace.records.iter().filter(|r| r.inner_iterations > max_inner) {
            failures.push(format!("row {} used {} inner iterations, cap {max_inner}", r.iteration, r.inner_iterations));
        }
    }
    let last_accepted = accepted.last().copied();
    match &trace.termination {
        Termination::FomStationary => {
            if let Some(r) = last_accepted {
                match r.trial_value {
                    Some(t) if (t - r.fom_value) / r.trial_scale.unwrap_or(r.value_scale) > tol => failures.push(format!(
                        "FOM-stationary, but the step at row {} gained more than the tolerance",
                        r.iteration
                    )),
                    None => failures.push("FOM-stationary without a recorded FOM step value".into()),
                    _ => {}
                }
            }
        }
        Termination::SurrogateStepRejected { .. } => match (trace.records.last(), last_accepted) {
            (Some(rej), Some(acc)) if !rej.accepted => {
                if (rej.fom_value - acc.fom_value) / rej.value_scale > tol {
                    failures.push("rejected candidate actually passed the acceptance test".into());
                }
            }
            _ => failures.push("surrogate-step-rejected without a rejected row".into()),
        },
        Termination::Incomplete { reason } => failures.push(format!("run incomplete: {reason}")),
        _ => {}
    }
    if let Some(r) = last_accepted {
        if trace.header.max_iterations < r.iteration {
            failures.push(format!("iteration {} exceeds the cap {}", r.iteration, trace.header.max_iterations));
        }
    }

    let best = accepted.iter().copied().fold(None, |b: Option<&TraceRecord>, r| match b {
        Some(x) if x.fom_value >= r.fom_value => Some(x),
        _ => Some(r),
    });
    CertificationReport {
        passed: failures.is_empty(),
        failures,
        status: trace.termination.label(),
        accepted_steps: accepted.len().saturating_sub(1),
        best_value: best.map(|r| r.fom_value),
        best_control: best.map(|r| r.control.clone()),
        final_value: last_accepted.map(|r| r.fom_value),
        final_control: last_accepted.map(|r| r.control.clone()),
        fom_evaluations: trace.total_fom_evaluations(),
        surrogate_evaluations: trace.total_surrogate_evaluations(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{Evaluation, ObjectiveFn};

    struct Bowl {
        center: Vec<f64>,
        delta: Vec<f64>,
    }

    impl ObjectiveFn for Bowl {
        fn dimension(&self) -> usize {
            self.center.len()
        }

        fn call(&self, u: &[f64]) -> Result<Evaluation> {
            let j: Vec<f64> = u.iter().zip(&self.center).map(|(a, b)| 1.0 - (a - b).powi(2)).collect();
            let value = j.iter().zip(&self.delta).map(|(a, b)| a * b).sum();
            Ok(Evaluation { value, components: Some(j) })
        }

        fn discount(&self) -> Option<&[f64]> {
            Some(&self.delta)
        }
    }

    fn bowl() -> Objective {
        Objective::new("bowl", Bowl { center: vec![0.7, 0.3, 0.6, 0.4], delta: vec![1.0, 0.9, 0.8, 0.7] })
    }

    fn cfg(construction: Construction) -> AmlConfig {
        AmlConfig {
            construction,
            max_outer: 10,
            max_inner: 30,
            arch_hidden: vec![10],
            trainer: TrainerConfig { restarts: 2, max_epochs: 200, rng_seed: 3, ..TrainerConfig::default() },
            enopt: EnOptConfig {
                sample_size: 30,
                rng_seed: 5,
                covariance: CovarianceConfig { sigmas: vec![0.05], rho: 0.5, mixing: 0.1 },
                value_scaling: ValueScaling::RunningRange,
                ..EnOptConfig::default()
            },
            ..AmlConfig::default()
        }
    }

    fn u0() -> ControlVector {
        ControlVector::new(vec![0.1, 0.9, 0.1, 0.9], 1, 4).unwrap()
    }

    #[test]
    fn huge_outer_tolerance_stops_after_first_step() {
        let f = bowl();
        let c = AmlConfig { outer_tolerance: 1e6, ..cfg(Construction::DnnS) };
        let (u, trace) = aml_enopt(&f, &u0(), &c, &ControlBounds::unit(1)).unwrap();
        assert_eq!(u, u0());
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.termination, Termination::FomStationary);
        let cert = certify(&trace);
        assert!(cert.passed, "{:?}", cert.failures);
        assert_eq!(cert.status, "FOM-stationary");
        assert_eq!(cert.accepted_steps, 0);
    }

    #[test]
    fn vector_variant_needs_components() {
        let f = Objective::from_fn("scalar", 4, |u| -u.iter().map(|v| v * v).sum::<f64>());
        let r = aml_enopt(&f, &u0(), &cfg(Construction::DnnV), &ControlBounds::unit(1));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn both_constructions_improve_and_certify() {
        for construction in [Construction::DnnS, Construction::DnnV] {
            let f = bowl();
            let c = cfg(construction);
            let r = aml_enopt_detailed(&f, &u0(), &c, &ControlBounds::unit(1)).unwrap();
            let cert = certify(&r.trace);
            assert!(cert.passed, "{construction:?}: {:?}", cert.failures);
            assert!(r.value > f.evaluate(u0().values()).unwrap());
            assert!(cert.accepted_steps >= 1, "{construction:?}: {}", cert.status);
            assert_eq!(r.trace.total_fom_evaluations() + 1, f.evaluations());
            assert_eq!(r.training_reports.len(), r.trace.records.iter().filter(|x| x.surrogate_value.is_some()).count());
            // One ensemble plus a few line-search trials per accepted outer iterate,
            // plus at most one rejected candidate.
            let per_step = c.enopt.sample_size as u64 + 1 + c.enopt.max_step_trials as u64;
            assert!(r.trace.total_fom_evaluations() <= (cert.accepted_steps as u64 + 2) * per_step);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let c = cfg(Construction::DnnS);
        let b = ControlBounds::unit(1);
        let (_, t1) = aml_enopt(&bowl(), &u0(), &c, &b).unwrap();
        let (_, t2) = aml_enopt(&bowl(), &u0(), &c, &b).unwrap();
        let (mut a, mut bb) = (Vec::new(), Vec::new());
        t1.write_jsonl(&mut a).unwrap();
        t2.write_jsonl(&mut bb).unwrap();
        assert_eq!(a, bb);
    }

    fn synthetic(values: &[f64], termination: Termination) -> IterationTrace {
        let mut t = IterationTrace::new(TraceHeader {
            algorithm: "aml-enopt-s".into(),
            objective: "synthetic".into(),
            dimension: 1,
            tolerance: 0.1,
            inner_tolerance: Some(1e-3),
            max_iterations: 10,
            max_inner_iterations: Some(5),
            sample_size: 10,
            seed: 0,
        });
        for (i, v) in values.iter().enumerate() {
            t.push(row(i, &ControlVector::new(vec![0.5], 1, 1).unwrap(), *v, Some(v + 0.05), None, 1, 10 * i as u64, 0, 1.0, None, true, &Instant::now()));
        }
        t.termination = termination;
        t
    }

    #[test]
    fn certification_rejects_non_monotone_acceptance() {
        let ok = certify(&synthetic(&[0.0, 0.5, 1.0], Termination::FomStationary));
        assert!(ok.passed, "{:?}", ok.failures);
        assert_eq!(ok.best_value, Some(1.0));
        let bad = certify(&synthetic(&[0.0, 0.5, 0.55], Termination::FomStationary));
        assert!(!bad.passed);
        let worse = certify(&synthetic(&[0.0, 1.0, 0.2], Termination::MaxIterations));
        assert!(!worse.passed);
        assert_eq!(worse.best_value, Some(1.0));
    }

    #[test]
    fn certification_status_for_rejection() {
        let mut t = synthetic(&[0.0, 0.5], Termination::SurrogateStepRejected { iteration: 1 });
        let mut rej = t.records[1].clone();
        rej.iteration = 2;
        rej.fom_value = 0.52;
        rej.accepted = false;
        rej.fom_evaluations = 25;
        t.push(rej);
        let cert = certify(&t);
        assert!(cert.passed, "{:?}", cert.failures);
        assert_eq!(cert.status, "surrogate-step-rejected at 1");
        assert_eq!(cert.final_value, Some(0.5));
    }
}
