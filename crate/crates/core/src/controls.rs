//! Control vectors, box constraints and the affine map to the unit cube.
//!
//! A control vector stacks `n_wells` control types for each of `n_steps`
//! control steps, time-major: all controls of step 1 first, then step 2, and
//! so on. Every module addresses components through [`ControlVector::index`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack tolerated by the bound checks of [`scale_to_unit`] and
/// [`unscale_from_unit`], so that values produced by round-trips are accepted.
const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    values: Vec<f64>,
    n_wells: usize,
    n_steps: usize,
}

impl ControlVector {
    pub fn new(values: Vec<f64>, n_wells: usize, n_steps: usize) -> Result<Self> {
        if n_wells == 0 || n_steps == 0 {
            return Err(Error::Shape("control layout needs at least one well and one step".into()));
        }
        if values.len() != n_wells * n_steps {
            return Err(Error::Shape(format!(
                "control vector has {} entries, layout {} wells x {} steps needs {}",
                values.len(),
                n_wells,
                n_steps,
                n_wells * n_steps
            )));
        }
        Ok(Self { values, n_wells, n_steps })
    }

    /// A control that holds `per_well[j]` for well `j` at every step.
    pub fn constant(per_well: &[f64], n_steps: usize) -> Result<Self> {
        let values = (0..n_steps).flat_map(|_| per_well.iter().copied()).collect();
        Self::new(values, per_well.len(), n_steps)
    }

    /// Flat position of well `well` at step `step` (both zero-based).
    #[inline]
    pub fn index(&self, well: usize, step: usize) -> usize {
        layout_index(self.n_wells, well, step)
    }

    pub fn get(&self, well: usize, step: usize) -> f64 {
        self.values[self.index(well, step)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn n_wells(&self) -> usize {
        self.n_wells
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.n_wells, self.n_steps)
    }

    /// Well (control type) owning the flat position `flat`.
    #[inline]
    pub fn well_of(&self, flat: usize) -> usize {
        flat % self.n_wells
    }

    /// Component-wise projection onto the admissible box.
    pub fn project(&self, bounds: &ControlBounds) -> Result<ControlVector> {
        bounds.check_layout(self)?;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(a, &v)| {
                let j = self.well_of(a);
                v.clamp(bounds.lower[j], bounds.upper[j])
            })
            .collect();
        Ok(Self { values, n_wells: self.n_wells, n_steps: self.n_steps })
    }

    pub fn is_feasible(&self, bounds: &ControlBounds) -> bool {
        bounds.n_wells() == self.n_wells
            && self.values.iter().enumerate().all(|(a, &v)| {
                let j = self.well_of(a);
                v >= bounds.lower[j] && v <= bounds.upper[j]
            })
    }

    pub fn max_abs_diff(&self, other: &ControlVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `index(j, i)` for a layout with `n_wells` control types per step.
#[inline]
pub fn layout_index(n_wells: usize, well: usize, step: usize) -> usize {
    step * n_wells + well
}

/// Time-invariant per-well box constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Shape(format!(
                "bounds need equal, non-zero lengths (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (lo, up)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < up) || !lo.is_finite() || !up.is_finite() {
                return Err(Error::Parameter(format!(
                    "bounds of well {j} must satisfy lower < upper, got ({lo}, {up})"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[0, 1]` for each of `n_wells` control types.
    pub fn unit(n_wells: usize) -> Self {
        Self { lower: vec![0.0; n_wells], upper: vec![1.0; n_wells] }
    }

    pub fn n_wells(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn range(&self, well: usize) -> f64 {
        self.upper[well] - self.lower[well]
    }

    fn check_layout(&self, u: &ControlVector) -> Result<()> {
        if u.n_wells != self.n_wells() {
            return Err(Error::Shape(format!(
                "control has {} wells per step, bounds describe {}",
                u.n_wells,
                self.n_wells()
            )));
        }
        Ok(())
    }
}

/// Affine map of a feasible control onto `[0, 1]^{N_u}`.
pub fn scale_to_unit(u: &ControlVector, bounds: &ControlBounds) -> Result<Vec<f64>> {
    bounds.check_layout(u)?;
    u.values
        .iter()
        .enumerate()
        .map(|(a, &v)| {
            let j = u.well_of(a);
            let (lo, up) = (bounds.lower[j], bounds.upper[j]);
            let slack = BOUND_SLACK * (up - lo);
            if !(v >= lo - slack && v <= up + slack) {
                return Err(Error::Precondition(format!(
                    "component {a} = {v} lies outside [{lo}, {up}]; project first"
                )));
            }
            Ok(((v - lo) / (up - lo)).clamp(0.0, 1.0))
        })
        .collect()
}

/// Inverse of [`scale_to_unit`].
pub fn unscale_from_unit(x: &[f64], bounds: &ControlBounds) -> Result<ControlVector> {
    let n_wells = bounds.n_wells();
    if x.len() % n_wells != 0 {
        return Err(Error::Shape(format!(
            "unit vector of length {} is not a multiple of {} wells",
            x.len(),
            n_wells
        )));
    }
    let values = x
        .iter()
        .enumerate()
        .map(|(a, &t)| {
            if !(t >= -BOUND_SLACK && t <= 1.0 + BOUND_SLACK) {
                return Err(Error::Precondition(format!("unit component {a} = {t} outside [0, 1]")));
            }
            let j = a % n_wells;
            let (lo, up) = (bounds.lower[j], bounds.upper[j]);
            Ok((lo + t.clamp(0.0, 1.0) * (up - lo)).clamp(lo, up))
        })
        .collect::<Result<Vec<_>>>()?;
    ControlVector::new(values, n_wells, x.len() / n_wells)
}
