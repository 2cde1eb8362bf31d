//! Cheap benchmark objectives with known gradients and optima.
//!
//! Controls use the same `n_types × n_steps` layout as the reservoir proxy.
//! Each objective is a sum of per-step terms, exposed as components with an
//! all-ones discount vector, so the vector-valued surrogate can be trained on
//! them too.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::controls::{layout_index, ControlBounds};
use crate::error::{Error, Result};
use crate::objective::{Evaluation, Objective, ObjectiveFn};

/// Upper bound of the multimodal objective's box.
pub const MULTIMODAL_UPPER: f64 = 0.9;

/// One-dimensional profile `g(x) = cos(4πx) + x/2` of the multimodal objective.
pub fn multimodal_profile(x: f64) -> f64 {
    (4.0 * PI * x).cos() + 0.5 * x
}

pub fn multimodal_profile_derivative(x: f64) -> f64 {
    -4.0 * PI * (4.0 * PI * x).sin() + 0.5
}

/// Interior local maxima of the profile on `[0, 0.9]`: `(local, global)`.
pub fn multimodal_maxima() -> (f64, f64) {
    let shift = (0.5 / (4.0 * PI)).asin() / (4.0 * PI);
    (shift, 0.5 + shift)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticKind {
    /// `−Σ w_i (u_i − c_i)²` on `[0, 1]`.
    Quadratic { center: Vec<f64>, weights: Vec<f64> },
    /// `Σ g(u_i)` on `[0, 0.9]`.
    Multimodal,
    /// `gᵀ u` on `[0, 1]`.
    Linear { gradient: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticObjective {
    name: String,
    n_types: usize,
    n_steps: usize,
    kind: AnalyticKind,
    delta: Vec<f64>,
}

impl AnalyticObjective {
    fn build(name: &str, n_types: usize, n_steps: usize, kind: AnalyticKind) -> Result<Self> {
        if n_types == 0 || n_steps == 0 {
            return Err(Error::Parameter("analytic objective needs at least one control".into()));
        }
        let n = n_types * n_steps;
        let check = |v: &Vec<f64>, what: &str| {
            if v.len() != n {
                Err(Error::Shape(format!("{what} has length {}, expected {n}", v.len())))
            } else {
                Ok(())
            }
        };
        match &kind {
            AnalyticKind::Quadratic { center, weights } => {
                check(center, "center")?;
                check(weights, "weights")?;
                if weights.iter().any(|w| !(*w > 0.0)) {
                    return Err(Error::Parameter("quadratic weights must be positive".into()));
                }
                if center.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(Error::Parameter("quadratic center must lie in [0, 1]".into()));
                }
            }
            AnalyticKind::Linear { gradient } => check(gradient, "gradient")?,
            AnalyticKind::Multimodal => {}
        }
        Ok(Self { name: name.into(), n_types, n_steps, kind, delta: vec![1.0; n_steps] })
    }

    pub fn quadratic(center: Vec<f64>, weights: Vec<f64>, n_types: usize) -> Result<Self> {
        let n_steps = if n_types == 0 { 0 } else { center.len() / n_types };
        Self::build("quadratic", n_types, n_steps, AnalyticKind::Quadratic { center, weights })
    }

    /// Quadratic with unit weights and an interior center in `[0.2, 0.8]`
    /// that varies smoothly over time, as well controls usually do.
    pub fn default_quadratic(n_types: usize, n_steps: usize) -> Result<Self> {
        let n = n_types * n_steps;
        let mut center = vec![0.0; n];
        for s in 0..n_steps {
            let t = if n_steps > 1 { s as f64 / (n_steps - 1) as f64 } else { 0.0 };
            for w in 0..n_types {
                let level = 0.3 + 0.4 * ((w as f64 * 0.618_033_988_75) % 1.0);
                center[layout_index(n_types, w, s)] = level + 0.1 * (t - 0.5);
            }
        }
        Self::quadratic(center, vec![1.0; n], n_types)
    }

    pub fn multimodal(n_types: usize, n_steps: usize) -> Result<Self> {
        Self::build("multimodal", n_types, n_steps, AnalyticKind::Multimodal)
    }

    pub fn linear(gradient: Vec<f64>, n_types: usize) -> Result<Self> {
        let n_steps = if n_types == 0 { 0 } else { gradient.len() / n_types };
        Self::build("linear", n_types, n_steps, AnalyticKind::Linear { gradient })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &AnalyticKind {
        &self.kind
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dimension(&self) -> usize {
        self.n_types * self.n_steps
    }

    pub fn bounds(&self) -> ControlBounds {
        let upper = match self.kind {
            AnalyticKind::Multimodal => MULTIMODAL_UPPER,
            _ => 1.0,
        };
        ControlBounds::new(vec![0.0; self.n_types], vec![upper; self.n_types]).expect("positive range")
    }

    fn term(&self, i: usize, x: f64) -> f64 {
        match &self.kind {
            AnalyticKind::Quadratic { center, weights } => -weights[i] * (x - center[i]).powi(2),
            AnalyticKind::Multimodal => multimodal_profile(x),
            AnalyticKind::Linear { gradient } => gradient[i] * x,
        }
    }

    pub fn components(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n_steps)
            .map(|s| {
                (0..self.n_types)
                    .map(|w| {
                        let i = layout_index(self.n_types, w, s);
                        self.term(i, u[i])
                    })
                    .sum()
            })
            .collect()
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        self.components(u).iter().sum()
    }

    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, x)| match &self.kind {
                AnalyticKind::Quadratic { center, weights } => -2.0 * weights[i] * (x - center[i]),
                AnalyticKind::Multimodal => multimodal_profile_derivative(*x),
                AnalyticKind::Linear { gradient } => gradient[i],
            })
            .collect()
    }

    /// Global maximiser over the box.
    pub fn argmax(&self) -> Vec<f64> {
        let n = self.dimension();
        match &self.kind {
            AnalyticKind::Quadratic { center, .. } => center.clone(),
            AnalyticKind::Multimodal => vec![multimodal_maxima().1; n],
            AnalyticKind::Linear { gradient } => gradient.iter().map(|g| if *g > 0.0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn into_objective(self) -> Objective {
        let name = self.name.clone();
        Objective::from_arc(name, Arc::new(self))
    }
}

impl ObjectiveFn for AnalyticObjective {
    fn dimension(&self) -> usize {
        AnalyticObjective::dimension(self)
    }

    fn call(&self, u: &[f64]) -> Result<Evaluation> {
        let j = self.components(u);
        Ok(Evaluation { value: j.iter().sum(), components: Some(j) })
    }

    fn discount(&self) -> Option<&[f64]> {
        Some(&self.delta)
    }
}

pub const ANALYTIC_NAMES: [&str; 3] = ["quadratic", "multimodal", "linear"];

/// Default instance by name. The linear gradient alternates in sign and grows
/// with the index.
pub fn analytic_by_name(name: &str, n_types: usize, n_steps: usize) -> Result<AnalyticObjective> {
    match name {
        "quadratic" => AnalyticObjective::default_quadratic(n_types, n_steps),
        "multimodal" => AnalyticObjective::multimodal(n_types, n_steps),
        "linear" => {
            let g = (0..n_types * n_steps).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 } * (1.0 + 0.1 * i as f64)).collect();
            AnalyticObjective::linear(g, n_types)
        }
        other => Err(Error::Config(format!("unknown analytic objective '{other}' (known: {})", ANALYTIC_NAMES.join(", ")))),
    }
}

/// All default analytic objectives for a given layout.
pub fn analytic_objectives(n_types: usize, n_steps: usize) -> Result<Vec<AnalyticObjective>> {
    ANALYTIC_NAMES.iter().map(|n| analytic_by_name(n, n_types, n_steps)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multimodal_maxima_confirmed_by_grid_search() {
        let (local, global) = multimodal_maxima();
        let n = 900_000;
        let xs: Vec<f64> = (0..=n).map(|k| MULTIMODAL_UPPER * k as f64 / n as f64).collect();
        let best = xs.iter().copied().fold(0.0, |b: f64, x| if multimodal_profile(x) > multimodal_profile(b) { x } else { b });
        assert!((best - global).abs() < 2e-6, "{best} vs {global}");
        let best_low = xs.iter().copied().filter(|x| *x < 0.25).fold(0.0, |b: f64, x| if multimodal_profile(x) > multimodal_profile(b) { x } else { b });
        assert!((best_low - local).abs() < 2e-6);
        assert!((global - 0.503_167).abs() < 1e-6 && (local - 0.003_167).abs() < 1e-6);
        assert!(multimodal_profile(global) > multimodal_profile(local) + 0.2);
    }

    #[test]
    fn quadratic_argmax_is_center() {
        let q = AnalyticObjective::default_quadratic(3, 4).unwrap();
        let c = q.argmax();
        assert_eq!(q.value(&c), 0.0);
        assert!(q.gradient(&c).iter().all(|g| *g == 0.0));
        assert!(c.iter().all(|x| (0.2..=0.8).contains(x)));
    }

    #[test]
    fn linear_gradient_is_configured() {
        let g = vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0];
        let l = AnalyticObjective::linear(g.clone(), 2).unwrap();
        assert_eq!(l.gradient(&[0.3; 6]), g);
        assert_eq!(l.n_steps(), 3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for obj in analytic_objectives(2, 3).unwrap() {
            let u: Vec<f64> = (0..6).map(|i| 0.1 + 0.13 * i as f64).collect();
            let g = obj.gradient(&u);
            for i in 0..6 {
                let h = 1e-6;
                let mut p = u.clone();
                let mut m = u.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (obj.value(&p) - obj.value(&m)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{} {i}", obj.name());
            }
        }
    }

    #[test]
    fn components_sum_to_value() {
        let o = analytic_by_name("multimodal", 2, 3).unwrap().into_objective();
        let e = o.evaluate_full(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let j = e.components.unwrap();
        assert_eq!(j.len(), 3);
        assert!((j.iter().sum::<f64>() - e.value).abs() < 1e-14);
        assert!((j[0] - multimodal_profile(0.1) - multimodal_profile(0.2)).abs() < 1e-14);
        assert_eq!(o.discount().unwrap(), &[1.0; 3]);
    }

    #[test]
    fn unknown_name_and_bad_shapes() {
        assert!(analytic_by_name("rosenbrock", 1, 1).is_err());
        assert!(AnalyticObjective::quadratic(vec![0.5; 4], vec![1.0; 3], 2).is_err());
        assert!(AnalyticObjective::quadratic(vec![1.5; 4], vec![1.0; 4], 2).is_err());
    }
}
