//! Black-box objectives `F: R^{N_u} → R` with evaluation accounting.
//!
//! Implementations provide [`ObjectiveFn`]; optimizers only see the
//! [`Objective`] wrapper, whose atomic counter is the cost metric reported in
//! every trace. An objective may additionally expose per-step components
//! `j(u)` together with a discount vector `δ` such that `F(u) = δᵀ j(u)`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::controls::{unscale_from_unit, ControlBounds};
use crate::error::{Error, Result};

/// Result of one objective call.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub components: Option<Vec<f64>>,
}

impl Evaluation {
    pub fn scalar(value: f64) -> Self {
        Self { value, components: None }
    }
}

pub trait ObjectiveFn: Send + Sync {
    fn dimension(&self) -> usize;

    fn call(&self, u: &[f64]) -> Result<Evaluation>;

    /// Discount vector `δ` when [`ObjectiveFn::call`] returns components.
    fn discount(&self) -> Option<&[f64]> {
        None
    }
}

/// Counting wrapper shared by all optimizers. Safe to evaluate from many
/// threads at once.
pub struct Objective {
    inner: Arc<dyn ObjectiveFn>,
    counter: AtomicU64,
    name: String,
}

impl std::fmt::Debug for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Objective")
            .field("name", &self.name)
            .field("dimension", &self.dimension())
            .field("evaluations", &self.evaluations())
            .finish()
    }
}

impl Objective {
    pub fn new(name: impl Into<String>, inner: impl ObjectiveFn + 'static) -> Self {
        Self::from_arc(name, Arc::new(inner))
    }

    pub fn from_arc(name: impl Into<String>, inner: Arc<dyn ObjectiveFn>) -> Self {
        Self { inner, counter: AtomicU64::new(0), name: name.into() }
    }

    /// Scalar objective from a closure.
    pub fn from_fn<F>(name: impl Into<String>, dimension: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(name, ClosureFn { dimension, f })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    pub fn has_components(&self) -> bool {
        self.inner.discount().is_some()
    }

    pub fn discount(&self) -> Option<&[f64]> {
        self.inner.discount()
    }

    /// Full evaluation, counted once.
    pub fn evaluate_full(&self, u: &[f64]) -> Result<Evaluation> {
        if u.len() != self.dimension() {
            return Err(Error::Shape(format!(
                "objective '{}' expects {} controls, got {}",
                self.name,
                self.dimension(),
                u.len()
            )));
        }
        self.counter.fetch_add(1, Ordering::SeqCst);
        let e = self.inner.call(u)?;
        if !e.value.is_finite() {
            return Err(Error::Evaluation(format!("objective '{}' returned {}", self.name, e.value)));
        }
        Ok(e)
    }

    pub fn evaluate(&self, u: &[f64]) -> Result<f64> {
        self.evaluate_full(u).map(|e| e.value)
    }

    /// Per-step values `j(u)`; fails when the objective does not expose them.
    pub fn evaluate_components(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.evaluate_full(u)?
            .components
            .ok_or_else(|| Error::Config(format!("objective '{}' exposes no per-step components", self.name)))
    }

    pub fn evaluations(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &Arc<dyn ObjectiveFn> {
        &self.inner
    }
}

struct ClosureFn<F> {
    dimension: usize,
    f: F,
}

impl<F> ObjectiveFn for ClosureFn<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn call(&self, u: &[f64]) -> Result<Evaluation> {
        Ok(Evaluation::scalar((self.f)(u)))
    }
}

/// Presents an objective defined on physical controls as a function on the
/// unit cube, using the affine map given by `bounds`.
pub struct UnitCube {
    inner: Arc<dyn ObjectiveFn>,
    bounds: ControlBounds,
}

impl UnitCube {
    pub fn new(inner: Arc<dyn ObjectiveFn>, bounds: ControlBounds) -> Result<Self> {
        if inner.dimension() % bounds.n_wells() != 0 {
            return Err(Error::Shape("objective dimension is not a multiple of the bound count".into()));
        }
        Ok(Self { inner, bounds })
    }
}

impl ObjectiveFn for UnitCube {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn call(&self, x: &[f64]) -> Result<Evaluation> {
        let u = unscale_from_unit(x, &self.bounds)?;
        self.inner.call(u.values())
    }

    fn discount(&self) -> Option<&[f64]> {
        self.inner.discount()
    }
}
