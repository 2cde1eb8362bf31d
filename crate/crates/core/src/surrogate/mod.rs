//! Neural-network surrogates of the objective.
//!
//! Inputs are controls mapped to the unit cube; outputs are min/max scaled per
//! component. A trained network becomes an [`Objective`] through
//! [`make_surrogate`], either approximating `J` directly (scalar variant) or
//! the per-step values `j`, contracted with the discount vector (vector variant).

pub mod lbfgs;
pub mod network;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controls::{scale_to_unit, ControlBounds, ControlVector};
use crate::error::{Error, Result};
use crate::objective::{Evaluation, Objective, ObjectiveFn};

pub use network::{loss_gradient, mse_loss, Activation, NetworkArchitecture, NetworkWeights, Sample};
pub use train::{train, train_scaled, TrainerConfig, TrainingReport};

/// `δ_i = (1 + d_τ)^{−t_i/τ}`.
pub fn discount_vector(d_tau: f64, tau: f64, times: &[f64]) -> Result<Vec<f64>> {
    if !(d_tau >= 0.0) || !(tau > 0.0) {
        return Err(Error::Parameter(format!("need d_tau >= 0 and tau > 0, got {d_tau} and {tau}")));
    }
    if times.first().is_some_and(|t| !(*t > 0.0)) || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Parameter("report times must be positive and strictly increasing".into()));
    }
    Ok(times.iter().map(|t| (1.0 + d_tau).powf(-t / tau)).collect())
}

/// Per-component affine map of raw targets onto `[0, 1]`. A component with
/// `max == min` scales to the constant 0.5 and unscales to `min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl OutputScaling {
    pub fn fit(targets: &[Vec<f64>]) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::Parameter("no targets to fit a scaling on".into()))?;
        let n = first.len();
        let mut min = first.clone();
        let mut max = first.clone();
        for t in targets {
            if t.len() != n {
                return Err(Error::Shape("targets differ in length".into()));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter("targets must be finite".into()));
            }
            for i in 0..n {
                min[i] = min[i].min(t[i]);
                max[i] = max[i].max(t[i]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    pub fn scale(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })
            .collect()
    }

    pub fn unscale(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| if hi > lo { lo + v * (hi - lo) } else { *lo })
            .collect()
    }

    /// Width of the raw range of component `i` (0 when degenerate).
    pub fn range(&self, i: usize) -> f64 {
        self.max[i] - self.min[i]
    }
}

/// Scaled training data together with the maps that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub input_scaling: ControlBounds,
    pub output_scaling: OutputScaling,
}

impl TrainingSet {
    pub fn from_raw(raw_pairs: &[(ControlVector, Vec<f64>)], bounds: &ControlBounds) -> Result<Self> {
        let targets: Vec<Vec<f64>> = raw_pairs.iter().map(|(_, y)| y.clone()).collect();
        let output_scaling = OutputScaling::fit(&targets)?;
        let samples = raw_pairs
            .iter()
            .map(|(u, y)| Ok(Sample { input: scale_to_unit(u, bounds)?, target: output_scaling.scale(y) }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, input_scaling: bounds.clone(), output_scaling })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateVariant {
    /// One output approximating `J`.
    Scalar,
    /// `N_t` outputs approximating `j`, contracted with `δ`.
    Vector,
}

/// Everything needed to evaluate a trained surrogate; the on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub variant: SurrogateVariant,
    pub weights: NetworkWeights,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub output_scaling: OutputScaling,
    pub discount: Option<Vec<f64>>,
}

impl SurrogateModel {
    pub fn new(
        weights: NetworkWeights,
        variant: SurrogateVariant,
        delta: Option<Vec<f64>>,
        bounds: &ControlBounds,
        output_scaling: OutputScaling,
    ) -> Result<Self> {
        weights.validate()?;
        let n_out = weights.architecture.n_outputs();
        if output_scaling.len() != n_out {
            return Err(Error::Shape(format!("{} output scalings for {} network outputs", output_scaling.len(), n_out)));
        }
        match variant {
            SurrogateVariant::Scalar if n_out != 1 => {
                return Err(Error::Shape(format!("scalar surrogate needs one output, network has {n_out}")));
            }
            SurrogateVariant::Vector => match &delta {
                Some(d) if d.len() == n_out => {}
                Some(d) => {
                    return Err(Error::Shape(format!("discount vector has {} entries, network has {n_out} outputs", d.len())));
                }
                None => return Err(Error::Config("vector surrogate needs a discount vector".into())),
            },
            _ => {}
        }
        if weights.architecture.n_inputs() % bounds.n_wells() != 0 {
            return Err(Error::Shape("network input size is not a multiple of the well count".into()));
        }
        Ok(Self {
            variant,
            weights,
            lower: bounds.lower().to_vec(),
            upper: bounds.upper().to_vec(),
            output_scaling,
            discount: if variant == SurrogateVariant::Vector { delta } else { None },
        })
    }

    pub fn bounds(&self) -> Result<ControlBounds> {
        ControlBounds::new(self.lower.clone(), self.upper.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let bounds = model.bounds()?;
        Self::new(model.weights, model.variant, model.discount, &bounds, model.output_scaling)
    }

    pub fn into_objective(self, name: impl Into<String>) -> Result<Objective> {
        let bounds = self.bounds()?;
        Ok(Objective::new(name, SurrogateFn { model: self, bounds }))
    }
}

struct SurrogateFn {
    model: SurrogateModel,
    bounds: ControlBounds,
}

impl ObjectiveFn for SurrogateFn {
    fn dimension(&self) -> usize {
        self.model.weights.architecture.n_inputs()
    }

    fn call(&self, u: &[f64]) -> Result<Evaluation> {
        let n_wells = self.bounds.n_wells();
        let cv = ControlVector::new(u.to_vec(), n_wells, u.len() / n_wells)?;
        let x = scale_to_unit(&cv, &self.bounds)?;
        let raw = self.model.output_scaling.unscale(&self.model.weights.forward(&x)?);
        Ok(match &self.model.discount {
            None => Evaluation::scalar(raw[0]),
            Some(d) => Evaluation { value: raw.iter().zip(d).map(|(a, b)| a * b).sum(), components: Some(raw) },
        })
    }

    fn discount(&self) -> Option<&[f64]> {
        self.model.discount.as_deref()
    }
}

/// Objective evaluating the trained network in raw units.
pub fn make_surrogate(
    weights: NetworkWeights,
    variant: SurrogateVariant,
    delta: Option<Vec<f64>>,
    bounds: &ControlBounds,
    output_scaling: OutputScaling,
) -> Result<Objective> {
    let name = match variant {
        SurrogateVariant::Scalar => "surrogate-scalar",
        SurrogateVariant::Vector => "surrogate-vector",
    };
    SurrogateModel::new(weights, variant, delta, bounds, output_scaling)?.into_objective(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    #[test]
    fn discount_examples() {
        assert_eq!(discount_vector(0.0, 365.0, &[30.0, 60.0, 90.0]).unwrap(), vec![1.0; 3]);
        let d = discount_vector(0.1, 365.0, &[365.0, 730.0]).unwrap();
        assert!((d[0] - 1.0 / 1.1).abs() < 1e-15);
        assert!((d[1] - 1.0 / 1.21).abs() < 1e-15);
        assert!((d[0] - 0.90909).abs() < 1e-5);
        assert!(discount_vector(0.1, 365.0, &[10.0, 10.0]).is_err());
        assert!(discount_vector(0.1, 365.0, &[0.0, 10.0]).is_err());
    }

    #[test]
    fn degenerate_scaling_rule() {
        let s = OutputScaling::fit(&[vec![3.0, 1.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.scale(&[3.0, 3.0]), vec![0.5, 0.5]);
        assert_eq!(s.unscale(&[0.9, 0.5]), vec![3.0, 3.0]);
    }

    proptest! {
        #[test]
        fn scaling_round_trip(ys in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 2..20)) {
            let s = OutputScaling::fit(&ys).unwrap();
            for y in &ys {
                let back = s.unscale(&s.scale(y));
                for (a, b) in back.iter().zip(y) {
                    let degenerate = s.range(0) == 0.0 && s.range(1) == 0.0 && s.range(2) == 0.0;
                    prop_assert!(degenerate || (a - b).abs() <= 1e-10 * b.abs().max(1.0));
                }
                prop_assert!(s.scale(y).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    fn net(sizes: &[usize], seed: u64) -> NetworkWeights {
        let arch = NetworkArchitecture::new(sizes.to_vec(), Activation::Tanh).unwrap();
        NetworkWeights::kaiming(&arch, &mut rng_from(seed, &[]))
    }

    #[test]
    fn scalar_surrogate_is_unscaled_forward() {
        let w = net(&[4, 6, 1], 1);
        let b = ControlBounds::new(vec![0.0, 100.0], vec![10.0, 300.0]).unwrap();
        let scaling = OutputScaling { min: vec![-2.0], max: vec![8.0] };
        let f = make_surrogate(w.clone(), SurrogateVariant::Scalar, None, &b, scaling.clone()).unwrap();
        let u = ControlVector::new(vec![5.0, 200.0, 2.5, 150.0], 2, 2).unwrap();
        let x = scale_to_unit(&u, &b).unwrap();
        let expected = scaling.unscale(&w.forward(&x).unwrap())[0];
        assert_eq!(f.evaluate(u.values()).unwrap(), expected);
        assert!(!f.has_components());
    }

    #[test]
    fn vector_surrogate_with_constant_outputs_sums_them() {
        let mut w = NetworkWeights::zeros(&NetworkArchitecture::new(vec![2, 3, 3], Activation::Tanh).unwrap());
        w.layers[1].bias = vec![0.0, 0.5, 1.0];
        let scaling = OutputScaling { min: vec![1.0, 2.0, 3.0], max: vec![3.0, 4.0, 5.0] };
        let b = ControlBounds::unit(1);
        let f = make_surrogate(w, SurrogateVariant::Vector, Some(vec![1.0; 3]), &b, scaling).unwrap();
        let e = f.evaluate_full(&[0.2, 0.7]).unwrap();
        assert_eq!(e.components.as_deref(), Some(&[1.0, 3.0, 5.0][..]));
        assert!((e.value - 9.0).abs() < 1e-14);
    }

    #[test]
    fn vector_surrogate_reproduces_discounted_value_at_interpolated_point() {
        let j = [120.0, -30.0, 45.0];
        let delta = discount_vector(0.1, 365.0, &[100.0, 200.0, 300.0]).unwrap();
        let scaling = OutputScaling { min: vec![0.0, -60.0, 40.0], max: vec![200.0, 0.0, 50.0] };
        let mut w = NetworkWeights::zeros(&NetworkArchitecture::new(vec![2, 2, 3], Activation::Tanh).unwrap());
        w.layers[1].bias = scaling.scale(&j);
        let f = make_surrogate(w, SurrogateVariant::Vector, Some(delta.clone()), &ControlBounds::unit(2), scaling).unwrap();
        let expected: f64 = j.iter().zip(&delta).map(|(a, b)| a * b).sum();
        assert!((f.evaluate(&[0.3, 0.9]).unwrap() - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn variant_shape_mismatch_is_rejected() {
        let b = ControlBounds::unit(1);
        let s1 = OutputScaling { min: vec![0.0], max: vec![1.0] };
        let s3 = OutputScaling { min: vec![0.0; 3], max: vec![1.0; 3] };
        assert!(matches!(make_surrogate(net(&[2, 3, 3], 0), SurrogateVariant::Scalar, None, &b, s3.clone()), Err(Error::Shape(_))));
        assert!(make_surrogate(net(&[2, 3, 3], 0), SurrogateVariant::Vector, Some(vec![1.0; 2]), &b, s3.clone()).is_err());
        assert!(make_surrogate(net(&[2, 3, 3], 0), SurrogateVariant::Vector, None, &b, s3).is_err());
        assert!(make_surrogate(net(&[2, 3, 1], 0), SurrogateVariant::Scalar, None, &b, s1).is_ok());
    }

    #[test]
    fn model_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("surrogate-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let b = ControlBounds::new(vec![0.0, 1.0], vec![2.0, 3.0]).unwrap();
        let model = SurrogateModel::new(
            net(&[4, 5, 2], 3),
            SurrogateVariant::Vector,
            Some(vec![0.9, 0.8]),
            &b,
            OutputScaling { min: vec![0.0, 1.0], max: vec![1.0, 2.0] },
        )
        .unwrap();
        model.save(&path).unwrap();
        let back = SurrogateModel::load(&path).unwrap();
        assert_eq!(back, model);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"activation\": \"tanh\""));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
