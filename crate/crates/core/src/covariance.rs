//! Control covariance: AR(1) block-diagonal initialisation, rank-one
//! adaptation and Gaussian perturbation sampling.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controls::{layout_index, ControlBounds, ControlVector};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    iteration: usize,
}

impl CovarianceMatrix {
    /// Wraps a symmetric matrix. Symmetry is checked exactly.
    pub fn from_matrix(entries: DMatrix<f64>, iteration: usize) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::Shape("covariance must be square".into()));
        }
        let n = entries.nrows();
        for a in 0..n {
            for b in 0..a {
                if entries[(a, b)] != entries[(b, a)] {
                    return Err(Error::Parameter(format!("covariance not symmetric at ({a}, {b})")));
                }
            }
        }
        Ok(Self { entries, iteration })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.entries.clone().cholesky().is_some()
    }

    /// `C v` for a plain slice.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (&self.entries * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    /// Lower-triangular factor `L` with `L Lᵀ = C`. When plain factorisation
    /// fails a diagonal jitter of `1e-12 · trace / N_u` is added once.
    pub fn lower_factor(&self) -> Result<DMatrix<f64>> {
        if let Some(ch) = self.entries.clone().cholesky() {
            return Ok(ch.l());
        }
        let n = self.dim();
        let jitter = 1e-12 * self.trace() / n as f64;
        log::warn!("covariance factorisation failed; retrying with diagonal jitter {jitter:e}");
        let mut m = self.entries.clone();
        for a in 0..n {
            m[(a, a)] += jitter;
        }
        m.cholesky()
            .map(|ch| ch.l())
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))
    }
}

/// Stationary AR(1) covariance per well, no correlation across wells:
/// `Cov(u_j^i, u_j^{i+h}) = σ_j² ρ^h / (1 − ρ²)`.
pub fn build_initial_covariance(
    sigmas: &[f64],
    rho: f64,
    n_wells: usize,
    n_steps: usize,
) -> Result<CovarianceMatrix> {
    if sigmas.len() != n_wells {
        return Err(Error::Shape(format!("{} sigmas for {} wells", sigmas.len(), n_wells)));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive, got {s}")));
    }
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::Parameter(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    let n = n_wells * n_steps;
    let mut entries = DMatrix::zeros(n, n);
    let denom = 1.0 - rho * rho;
    for (j, sigma) in sigmas.iter().enumerate() {
        let var = sigma * sigma / denom;
        for i in 0..n_steps {
            for i2 in i..n_steps {
                let h = (i2 - i) as i32;
                let value = var * rho.powi(h);
                let a = layout_index(n_wells, j, i);
                let b = layout_index(n_wells, j, i2);
                entries[(a, b)] = value;
                entries[(b, a)] = value;
            }
        }
    }
    Ok(CovarianceMatrix { entries, iteration: 0 })
}

/// Trace-preserving rank-one update
/// `C' = (1 − γ) C + γ · (tr C / ‖w‖²) · w wᵀ`.
///
/// A zero step carries no direction information and returns `prev` unchanged.
pub fn adapt_covariance(prev: &CovarianceMatrix, step: &[f64], mixing: f64) -> Result<CovarianceMatrix> {
    if !(mixing > 0.0 && mixing < 1.0) {
        return Err(Error::Parameter(format!("mixing weight must lie in (0, 1), got {mixing}")));
    }
    let n = prev.dim();
    if step.len() != n {
        return Err(Error::Shape(format!("step has length {}, covariance is {n}x{n}", step.len())));
    }
    let norm2: f64 = step.iter().map(|w| w * w).sum();
    if norm2 == 0.0 {
        return Ok(CovarianceMatrix { entries: prev.entries.clone(), iteration: prev.iteration + 1 });
    }
    let s = prev.trace() / norm2;
    let mut entries = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..=a {
            let v = (1.0 - mixing) * prev.entries[(a, b)] + mixing * s * step[a] * step[b];
            entries[(a, b)] = v;
            entries[(b, a)] = v;
        }
    }
    Ok(CovarianceMatrix { entries, iteration: prev.iteration + 1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationEnsemble {
    pub members: Vec<ControlVector>,
    pub mean: ControlVector,
}

impl PerturbationEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Draws `n` samples from `N(mean, cov)` and projects each onto the box.
pub fn sample_ensemble(
    mean: &ControlVector,
    cov: &CovarianceMatrix,
    n: usize,
    bounds: &ControlBounds,
    seed: u64,
) -> Result<PerturbationEnsemble> {
    let raw = sample_unprojected(mean.values(), cov, n, seed)?;
    let members = raw
        .into_iter()
        .map(|v| mean.with_values(v)?.project(bounds))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationEnsemble { members, mean: mean.clone() })
}

/// Gaussian draws without projection; the building block of [`sample_ensemble`].
pub fn sample_unprojected(mean: &[f64], cov: &CovarianceMatrix, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let dim = cov.dim();
    if mean.len() != dim {
        return Err(Error::Shape(format!("mean has length {}, covariance is {dim}x{dim}", mean.len())));
    }
    if n == 0 {
        return Err(Error::Parameter("sample size must be positive".into()));
    }
    let l = cov.lower_factor()?;
    let mut rng = rng_from(seed, &[0x5A4D]);
    let mut z = vec![0.0; dim];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let sample = (0..dim)
            .map(|a| mean[a] + (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>())
            .collect();
        out.push(sample);
    }
    Ok(out)
}

/// Parameters of the initial covariance and its adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceConfig {
    /// Per-well AR(1) noise scale σ_j. A single entry is broadcast to all wells.
    pub sigmas: Vec<f64>,
    pub rho: f64,
    /// Mixing weight γ of the rank-one update.
    pub mixing: f64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self { sigmas: vec![0.001], rho: 0.9, mixing: 0.1 }
    }
}

impl CovarianceConfig {
    pub fn sigmas_for(&self, n_wells: usize) -> Result<Vec<f64>> {
        match self.sigmas.len() {
            1 => Ok(vec![self.sigmas[0]; n_wells]),
            len if len == n_wells => Ok(self.sigmas.clone()),
            len => Err(Error::Shape(format!("{len} sigmas configured for {n_wells} wells"))),
        }
    }
}

/// Covariance carried across optimization steps. The matrix is built lazily
/// on first use; each recorded step triggers one rank-one adaptation before
/// the next sampling.
#[derive(Debug, Clone)]
pub struct CovarianceState {
    config: CovarianceConfig,
    matrix: Option<CovarianceMatrix>,
    pending_step: Option<Vec<f64>>,
}

impl CovarianceState {
    pub fn new(config: CovarianceConfig) -> Self {
        Self { config, matrix: None, pending_step: None }
    }

    pub fn config(&self) -> &CovarianceConfig {
        &self.config
    }

    pub fn current(&self) -> Option<&CovarianceMatrix> {
        self.matrix.as_ref()
    }

    /// Covariance to sample with at the next step.
    pub fn prepare(&mut self, n_wells: usize, n_steps: usize) -> Result<&CovarianceMatrix> {
        let next = match (self.matrix.take(), self.pending_step.take()) {
            (None, _) => {
                build_initial_covariance(&self.config.sigmas_for(n_wells)?, self.config.rho, n_wells, n_steps)?
            }
            (Some(prev), Some(step)) => adapt_covariance(&prev, &step, self.config.mixing)?,
            (Some(prev), None) => prev,
        };
        if next.dim() != n_wells * n_steps {
            return Err(Error::Shape("covariance state does not match control layout".into()));
        }
        Ok(self.matrix.insert(next))
    }

    /// Remember the accepted move `u_{k+1} − u_k` for the next adaptation.
    pub fn record_step(&mut self, step: Vec<f64>) {
        self.pending_step = Some(step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_matches_ar1_variance() {
        let c = build_initial_covariance(&[0.001], 0.9, 1, 4).unwrap();
        let expected = 1e-6 / (1.0 - 0.81);
        assert!((c.entries()[(0, 0)] - expected).abs() < 1e-20);
        assert!((c.entries()[(0, 0)] - 5.263e-6).abs() < 1e-9);
    }

    #[test]
    fn zero_correlation_gives_white_noise() {
        let c = build_initial_covariance(&[0.5, 2.0], 0.0, 2, 3).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let expected = if a == b { [0.25, 4.0][a % 2] } else { 0.0 };
                assert_eq!(c.entries()[(a, b)], expected);
            }
        }
    }

    #[test]
    fn two_wells_three_steps_by_hand() {
        let (s1, s2, rho) = (0.3, 0.7, 0.5);
        let c = build_initial_covariance(&[s1, s2], rho, 2, 3).unwrap();
        let d = 1.0 - rho * rho;
        let block = |s: f64| {
            let v = s * s / d;
            [[v, v * rho, v * rho * rho], [v * rho, v, v * rho], [v * rho * rho, v * rho, v]]
        };
        let blocks = [block(s1), block(s2)];
        for a in 0..6 {
            for b in 0..6 {
                let (wa, ta, wb, tb) = (a % 2, a / 2, b % 2, b / 2);
                let expected = if wa == wb { blocks[wa][ta][tb] } else { 0.0 };
                assert!((c.entries()[(a, b)] - expected).abs() <= 1e-15 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(build_initial_covariance(&[0.1], 1.0, 1, 3).is_err());
        assert!(build_initial_covariance(&[0.0], 0.5, 1, 3).is_err());
        assert!(build_initial_covariance(&[0.1, 0.1], 0.5, 1, 3).is_err());
    }

    #[test]
    fn strong_correlation_stays_positive_definite() {
        for rho in [-0.99, -0.5, 0.0, 0.9, 0.99] {
            let c = build_initial_covariance(&[0.001, 0.02, 1.0], rho, 3, 10).unwrap();
            assert!(c.is_positive_definite(), "rho = {rho}");
        }
    }

    #[test]
    fn adaptation_hand_example() {
        let prev = CovarianceMatrix::from_matrix(DMatrix::identity(2, 2), 0).unwrap();
        let next = adapt_covariance(&prev, &[1.0, 0.0], 0.5).unwrap();
        assert_eq!(next.entries(), &DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]));
        assert_eq!(next.iteration(), 1);
    }

    #[test]
    fn adaptation_with_zero_step_is_identity() {
        let prev = build_initial_covariance(&[0.1, 0.2], 0.9, 2, 3).unwrap();
        let next = adapt_covariance(&prev, &[0.0; 6], 0.3).unwrap();
        assert_eq!(next.entries(), prev.entries());
    }

    #[test]
    fn adaptation_vanishing_mixing_limit() {
        let prev = build_initial_covariance(&[0.1, 0.2], 0.9, 2, 3).unwrap();
        let next = adapt_covariance(&prev, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0], 1e-300).unwrap();
        for (a, b) in next.entries().iter().zip(prev.entries().iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-12));
        }
        assert!(adapt_covariance(&prev, &[0.0; 6], 0.0).is_err());
        assert!(adapt_covariance(&prev, &[0.0; 6], 1.0).is_err());
    }

    #[test]
    fn degenerate_covariance_collapses_samples_to_mean() {
        let mean = ControlVector::new(vec![0.3, 0.6, 0.2, 0.9], 2, 2).unwrap();
        let cov = CovarianceMatrix::from_matrix(DMatrix::identity(4, 4) * 1e-30, 0).unwrap();
        let ens = sample_ensemble(&mean, &cov, 20, &ControlBounds::unit(2), 7).unwrap();
        for m in &ens.members {
            assert!(m.max_abs_diff(&mean) < 1e-14);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_feasible() {
        let mean = ControlVector::new(vec![0.0, 0.6, 1.0, 0.9], 2, 2).unwrap();
        let cov = build_initial_covariance(&[0.5, 0.5], 0.5, 2, 2).unwrap();
        let b = ControlBounds::unit(2);
        let e1 = sample_ensemble(&mean, &cov, 50, &b, 11).unwrap();
        let e2 = sample_ensemble(&mean, &cov, 50, &b, 11).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 50);
        assert!(e1.members.iter().all(|m| m.is_feasible(&b)));
        let e3 = sample_ensemble(&mean, &cov, 50, &b, 12).unwrap();
        assert_ne!(e1, e3);
    }

    #[test]
    fn sample_mean_within_three_standard_errors() {
        let cov = build_initial_covariance(&[0.001, 0.002], 0.9, 2, 3).unwrap();
        let mean = vec![0.5; 6];
        let n = 100_000;
        let draws = sample_unprojected(&mean, &cov, n, 3).unwrap();
        for a in 0..6 {
            let avg = draws.iter().map(|d| d[a]).sum::<f64>() / n as f64;
            let se = (cov.entries()[(a, a)] / n as f64).sqrt();
            assert!((avg - 0.5).abs() < 3.0 * se, "component {a}: {avg}");
        }
    }

    #[test]
    fn empirical_covariance_converges() {
        let cov = build_initial_covariance(&[1.0, 0.5], 0.9, 2, 3).unwrap();
        let mean = vec![0.0; 6];
        let n = 100_000;
        let draws = sample_unprojected(&mean, &cov, n, 5).unwrap();
        let mut emp = DMatrix::<f64>::zeros(6, 6);
        for d in &draws {
            for a in 0..6 {
                for b in 0..6 {
                    emp[(a, b)] += d[a] * d[b];
                }
            }
        }
        emp /= n as f64;
        let rel = (&emp - cov.entries()).norm() / cov.entries().norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn state_builds_then_adapts() {
        let mut st = CovarianceState::new(CovarianceConfig { sigmas: vec![0.1], rho: 0.5, mixing: 0.5 });
        let c0 = st.prepare(2, 2).unwrap().clone();
        assert_eq!(c0.iteration(), 0);
        assert_eq!(st.prepare(2, 2).unwrap(), &c0);
        st.record_step(vec![1.0, 0.0, 0.0, 0.0]);
        let c1 = st.prepare(2, 2).unwrap().clone();
        assert_eq!(c1.iteration(), 1);
        assert!((c1.trace() - c0.trace()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn entry_formula_holds(sig in 0.001f64..3.0, rho in -0.99f64..0.99, i in 0usize..6, h in 0usize..6) {
            prop_assume!(i + h < 6);
            let c = build_initial_covariance(&[1.0, sig], rho, 2, 6).unwrap();
            let expected = sig * sig * rho.powi(h as i32) / (1.0 - rho * rho);
            let got = c.entries()[(layout_index(2, 1, i), layout_index(2, 1, i + h))];
            prop_assert!((got - expected).abs() <= 1e-14 * expected.abs().max(1e-300));
        }

        #[test]
        fn adaptation_keeps_spd_and_symmetry(
            step in prop::collection::vec(-1.0f64..1.0, 6),
            gi in 0usize..3,
            rho in -0.95f64..0.95,
        ) {
            let gamma = [0.05, 0.1, 0.5][gi];
            let prev = build_initial_covariance(&[0.01, 0.2], rho, 2, 3).unwrap();
            let next = adapt_covariance(&prev, &step, gamma).unwrap();
            let m = next.entries();
            for a in 0..6 { for b in 0..6 { prop_assert_eq!(m[(a, b)], m[(b, a)]); } }
            prop_assert!(next.is_positive_definite());
            let again = adapt_covariance(&next, &step, gamma).unwrap();
            prop_assert!(again.is_positive_definite());
        }
    }
}
