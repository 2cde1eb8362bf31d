//! Network training: data scaling, a seeded train/validation split, L-BFGS
//! epochs with validation-based early stopping, and restarts from fresh
//! Kaiming initializations.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lbfgs::{Lbfgs, LbfgsConfig, StepOutcome};
use super::network::{Backprop, NetworkArchitecture, NetworkWeights, Sample};
use super::{OutputScaling, TrainingSet};
use crate::controls::{ControlBounds, ControlVector};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Smallest data set accepted by [`train`].
pub const MIN_TRAINING_PAIRS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub restarts: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub optimizer_memory: usize,
    /// Quasi-Newton iterations per epoch.
    pub iterations_per_epoch: usize,
    pub rng_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            restarts: 15,
            max_epochs: 1000,
            patience: 10,
            validation_fraction: 0.1,
            optimizer_memory: 10,
            iterations_per_epoch: 20,
            rng_seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Parameter("restarts, max_epochs and patience must be positive".into()));
        }
        if self.optimizer_memory == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::Parameter("optimizer_memory and iterations_per_epoch must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// `(n_train, n_val)` for `n` pairs; both parts are non-empty.
    pub fn split_sizes(&self, n: usize) -> Result<(usize, usize)> {
        let n_val = ((self.validation_fraction * n as f64).round() as usize).max(1);
        if n_val >= n {
            return Err(Error::Parameter(format!("{n} pairs leave no training data after the validation split")));
        }
        Ok((n - n_val, n_val))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub restart: usize,
    /// Summed losses at the checkpoint with the lowest validation loss.
    pub train_loss: f64,
    pub validation_loss: f64,
    pub epochs: usize,
    /// Epoch of the last validation improvement (0 = initialization).
    pub best_epoch: usize,
    /// Set when the restart produced non-finite losses and was discarded.
    pub abandoned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub min: f64,
    pub max: f64,
    pub avg: f64,
}

impl LossStats {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self { min: f64::NAN, max: f64::NAN, avg: f64::NAN };
        }
        Self {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            avg: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub restarts: Vec<RestartReport>,
    pub selected: usize,
    pub n_train: usize,
    pub n_validation: usize,
    /// Summed losses over completed restarts.
    pub train: LossStats,
    pub validation: LossStats,
    /// Selected restart's losses divided by the set sizes.
    pub train_mean_per_sample: f64,
    pub validation_mean_per_sample: f64,
    pub output_scaling: OutputScaling,
}

impl TrainingReport {
    pub fn selected_restart(&self) -> &RestartReport {
        &self.restarts[self.selected]
    }
}

/// Seeded partition into training and validation samples.
pub fn split_samples(samples: &[Sample], cfg: &TrainerConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (_, n_val) = cfg.split_sizes(samples.len())?;
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng_from(cfg.rng_seed, &[0x5B17]));
    let mut is_val = vec![false; samples.len()];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in samples.iter().zip(is_val) {
        if v {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, val))
}

struct RestartOutcome {
    report: RestartReport,
    params: Vec<f64>,
}

fn run_restart(
    arch: &NetworkArchitecture,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainerConfig,
    restart: usize,
) -> RestartOutcome {
    let mut rng = rng_from(derive_seed(cfg.rng_seed, &[0x4E17, restart as u64]), &[]);
    let mut params = NetworkWeights::kaiming(arch, &mut rng).to_flat();
    let mut train_bp = Backprop::new(arch);
    let mut val_bp = Backprop::new(arch);
    let mut fun = |p: &[f64], g: &mut [f64]| train_bp.loss_and_gradient(p, train, g);

    let mut grad = vec![0.0; params.len()];
    let mut loss = fun(&params, &mut grad);
    let mut best_val = val_bp.loss(&params, val);
    let mut best = params.clone();
    let mut best_train = loss;
    let mut best_epoch = 0;
    let abandoned_at = |epochs: usize| RestartOutcome {
        report: RestartReport {
            restart,
            train_loss: f64::NAN,
            validation_loss: f64::NAN,
            epochs,
            best_epoch: 0,
            abandoned: true,
        },
        params: Vec::new(),
    };
    if !loss.is_finite() || !best_val.is_finite() {
        log::warn!("training restart {restart}: non-finite initial loss, restart abandoned");
        return abandoned_at(0);
    }

    let lbfgs_cfg = LbfgsConfig { memory: cfg.optimizer_memory, ..LbfgsConfig::default() };
    let mut opt = Lbfgs::new(lbfgs_cfg);
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        let mut outcome = StepOutcome::Progress;
        for _ in 0..cfg.iterations_per_epoch {
            outcome = opt.step(&mut params, &mut loss, &mut grad, &mut fun);
            if outcome != StepOutcome::Progress {
                break;
            }
        }
        if !loss.is_finite() {
            log::warn!("training restart {restart}: non-finite loss at epoch {epoch}, restart abandoned");
            return abandoned_at(epoch);
        }
        let v = val_bp.loss(&params, val);
        if !v.is_finite() {
            log::warn!("training restart {restart}: non-finite validation loss at epoch {epoch}, restart abandoned");
            return abandoned_at(epoch);
        }
        if v < best_val {
            best_val = v;
            best.copy_from_slice(&params);
            best_train = loss;
            best_epoch = epoch;
        }
        if epoch - best_epoch >= cfg.patience || outcome != StepOutcome::Progress {
            break;
        }
    }
    log::debug!(
        "training restart {restart}: {epochs} epochs, best at {best_epoch}, train {best_train:.3e}, validation {best_val:.3e}"
    );
    RestartOutcome {
        report: RestartReport {
            restart,
            train_loss: best_train,
            validation_loss: best_val,
            epochs,
            best_epoch,
            abandoned: false,
        },
        params: best,
    }
}

/// Trains on already scaled samples. Restarts run concurrently; selection is
/// the lowest `train + validation` loss, ties broken by restart index.
pub fn train_scaled(
    samples: &[Sample],
    arch: &NetworkArchitecture,
    cfg: &TrainerConfig,
    output_scaling: OutputScaling,
) -> Result<(NetworkWeights, TrainingReport)> {
    cfg.validate()?;
    arch.validate()?;
    if samples.len() < MIN_TRAINING_PAIRS {
        return Err(Error::Parameter(format!(
            "training needs at least {MIN_TRAINING_PAIRS} pairs, got {}",
            samples.len()
        )));
    }
    let (ni, no) = (arch.n_inputs(), arch.n_outputs());
    if samples.iter().any(|s| s.input.len() != ni || s.target.len() != no) {
        return Err(Error::Shape(format!("samples must have {ni} inputs and {no} targets")));
    }
    let (train, val) = split_samples(samples, cfg)?;
    let outcomes: Vec<RestartOutcome> =
        (0..cfg.restarts).into_par_iter().map(|r| run_restart(arch, &train, &val, cfg, r)).collect();

    let selected = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.report.abandoned)
        .min_by(|(i, a), (j, b)| {
            let la = a.report.train_loss + a.report.validation_loss;
            let lb = b.report.train_loss + b.report.validation_loss;
            la.total_cmp(&lb).then(i.cmp(j))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Training(format!("all {} training restarts diverged", cfg.restarts)))?;

    let done = || outcomes.iter().filter(|o| !o.report.abandoned);
    let train_stats = LossStats::of(done().map(|o| o.report.train_loss));
    let val_stats = LossStats::of(done().map(|o| o.report.validation_loss));
    let weights = NetworkWeights::from_flat(arch, &outcomes[selected].params)?;
    let sel = &outcomes[selected].report;
    let report = TrainingReport {
        selected,
        n_train: train.len(),
        n_validation: val.len(),
        train: train_stats,
        validation: val_stats,
        train_mean_per_sample: sel.train_loss / train.len() as f64,
        validation_mean_per_sample: sel.validation_loss / val.len() as f64,
        restarts: outcomes.into_iter().map(|o| o.report).collect(),
        output_scaling,
    };
    Ok((weights, report))
}

/// Scales raw `(control, target)` pairs and trains a network on them.
/// The output scaling used is returned in the report.
pub fn train(
    raw_pairs: &[(ControlVector, Vec<f64>)],
    arch: &NetworkArchitecture,
    cfg: &TrainerConfig,
    bounds: &ControlBounds,
) -> Result<(NetworkWeights, TrainingReport)> {
    if raw_pairs.len() < MIN_TRAINING_PAIRS {
        return Err(Error::Parameter(format!(
            "training needs at least {MIN_TRAINING_PAIRS} pairs, got {}",
            raw_pairs.len()
        )));
    }
    let set = TrainingSet::from_raw(raw_pairs, bounds)?;
    train_scaled(&set.samples, arch, cfg, set.output_scaling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::network::{mse_loss, Activation};
    use rand::Rng;

    fn quadratic_pairs(n: usize, seed: u64) -> (Vec<(ControlVector, Vec<f64>)>, ControlBounds) {
        let b = ControlBounds::unit(2);
        let mut rng = rng_from(seed, &[]);
        let pairs = (0..n)
            .map(|_| {
                let x: Vec<f64> = vec![rng.random(), rng.random()];
                let y = (x[0] - 0.3).powi(2) + 0.5 * (x[1] - 0.6).powi(2);
                (ControlVector::new(x, 2, 1).unwrap(), vec![y])
            })
            .collect();
        (pairs, b)
    }

    fn small_cfg() -> TrainerConfig {
        TrainerConfig { restarts: 3, max_epochs: 300, rng_seed: 7, ..TrainerConfig::default() }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let samples: Vec<Sample> = (0..20).map(|i| Sample { input: vec![i as f64], target: vec![0.0] }).collect();
        let cfg = small_cfg();
        let (t1, v1) = split_samples(&samples, &cfg).unwrap();
        let (t2, v2) = split_samples(&samples, &cfg).unwrap();
        assert_eq!((t1.len(), v1.len()), (18, 2));
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
        assert!(v1.iter().all(|v| !t1.contains(v)));
        let (_, v3) = split_samples(&samples, &TrainerConfig { rng_seed: 8, ..cfg }).unwrap();
        assert_ne!(v1, v3);
    }

    #[test]
    fn too_few_pairs_is_a_parameter_error() {
        let (pairs, b) = quadratic_pairs(9, 1);
        let arch = NetworkArchitecture::new(vec![2, 4, 1], Activation::Tanh).unwrap();
        assert!(matches!(train(&pairs, &arch, &small_cfg(), &b), Err(Error::Parameter(_))));
    }

    #[test]
    fn constant_target_is_fit_exactly() {
        let b = ControlBounds::unit(2);
        let mut rng = rng_from(2, &[]);
        let pairs: Vec<_> = (0..30)
            .map(|_| (ControlVector::new(vec![rng.random(), rng.random()], 2, 1).unwrap(), vec![4.2]))
            .collect();
        let arch = NetworkArchitecture::new(vec![2, 5, 1], Activation::Tanh).unwrap();
        let (w, report) = train(&pairs, &arch, &small_cfg(), &b).unwrap();
        assert!(report.selected_restart().train_loss < 1e-8, "{:?}", report.selected_restart());
        let y = w.forward(&[0.5, 0.5]).unwrap()[0];
        assert!((y - 0.5).abs() < 1e-4);
        assert_eq!(report.output_scaling.unscale(&[y]), vec![4.2]);
    }

    #[test]
    fn quadratic_fit_and_selection() {
        let (pairs, b) = quadratic_pairs(100, 3);
        let arch = NetworkArchitecture::new(vec![2, 25, 25, 1], Activation::Tanh).unwrap();
        let cfg = TrainerConfig { restarts: 4, rng_seed: 11, ..TrainerConfig::default() };
        let (w, report) = train(&pairs, &arch, &cfg, &b).unwrap();
        let sel = report.selected_restart();
        assert!(sel.train_loss < 1e-3, "{sel:?}");
        for r in report.restarts.iter().filter(|r| !r.abandoned) {
            assert!(sel.train_loss + sel.validation_loss <= r.train_loss + r.validation_loss);
            assert!(r.epochs <= r.best_epoch + cfg.patience);
        }
        let set = TrainingSet::from_raw(&pairs, &b).unwrap();
        let (train_s, val_s) = split_samples(&set.samples, &cfg).unwrap();
        assert!((mse_loss(&w, &train_s).unwrap() - sel.train_loss).abs() <= 1e-12 * (1.0 + sel.train_loss));
        assert!((mse_loss(&w, &val_s).unwrap() - sel.validation_loss).abs() <= 1e-12 * (1.0 + sel.validation_loss));

        let (w2, _) = train(&pairs, &arch, &cfg, &b).unwrap();
        assert_eq!(w, w2);
    }
}
