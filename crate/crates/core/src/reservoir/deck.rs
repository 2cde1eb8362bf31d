//! Model decks: grid, rock, fluid, polymer, schedule, wells and economics,
//! loaded from TOML. Per-cell arrays may be given explicitly or generated
//! from a seeded log-normal field.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::npv::EconParams;
use crate::controls::{ControlBounds, ControlVector};
use crate::error::{Error, Result};
use crate::rng::rng_from;

pub const MILLIDARCY: f64 = 9.869233e-16;
pub const CENTIPOISE: f64 = 1e-3;
pub const BAR: f64 = 1e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Cell sizes in metres.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }
}

/// Per-cell property: constant, explicit list (row-major, x fastest) or a
/// smoothed log-normal random field `exp(ln(median) + log_std·z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant {
        value: f64,
    },
    Values {
        values: Vec<f64>,
    },
    LogNormal {
        median: f64,
        log_std: f64,
        /// Half-width of the moving-average window that correlates the field.
        smoothing: usize,
        seed: u64,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
}

/// Standardised, spatially correlated Gaussian field on the grid.
pub fn correlated_normal_field(grid: &GridSpec, smoothing: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed, &[0xF1E1D]);
    let (nx, ny) = (grid.nx, grid.ny);
    let r = smoothing as isize;
    // Pad so the smoothed field has no edge effects.
    let (px, py) = (nx + 2 * smoothing, ny + 2 * smoothing);
    let white: Vec<f64> = (0..px * py).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut field = vec![0.0; nx * ny];
    for iy in 0..ny {
        for ix in 0..nx {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let x = (ix as isize + r + dx) as usize;
                    let y = (iy as isize + r + dy) as usize;
                    acc += white[y * px + x];
                }
            }
            field[iy * nx + ix] = acc;
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    field.iter().map(|v| (v - mean) / sd).collect()
}

impl FieldSpec {
    pub fn realize(&self, grid: &GridSpec) -> Result<Vec<f64>> {
        let n = grid.n_cells();
        Ok(match self {
            FieldSpec::Constant { value } => vec![*value; n],
            FieldSpec::Values { values } => {
                if values.len() != n {
                    return Err(Error::Config(format!("field has {} values for {} cells", values.len(), n)));
                }
                values.clone()
            }
            FieldSpec::LogNormal { median, log_std, smoothing, seed, min, max } => {
                let z = correlated_normal_field(grid, *smoothing, *seed);
                z.iter()
                    .map(|zi| {
                        let v = (median.ln() + log_std * zi).exp();
                        v.max(min.unwrap_or(f64::NEG_INFINITY)).min(max.unwrap_or(f64::INFINITY))
                    })
                    .collect()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RockSpec {
    pub porosity: FieldSpec,
    pub permeability_md: FieldSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluidSpec {
    pub mu_water_cp: f64,
    pub mu_oil_cp: f64,
    /// Residual (connate) water saturation.
    pub swr: f64,
    /// Residual oil saturation.
    pub sor: f64,
    /// Corey exponents.
    pub n_water: f64,
    pub n_oil: f64,
    pub krw_max: f64,
    pub kro_max: f64,
    pub initial_sw: f64,
    pub initial_pressure_bar: f64,
}

impl Default for FluidSpec {
    fn default() -> Self {
        Self {
            mu_water_cp: 0.5,
            mu_oil_cp: 5.0,
            swr: 0.1,
            sor: 0.1,
            n_water: 2.0,
            n_oil: 2.0,
            krw_max: 1.0,
            kro_max: 1.0,
            initial_sw: 0.1,
            initial_pressure_bar: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolymerSpec {
    /// Todd–Longstaff ω.
    pub mixing_omega: f64,
    /// Fully mixed viscosity `μ_w (1 + a c)`; `a` in sm³/kg.
    pub viscosity_factor: f64,
    /// kg polymer per kg rock.
    pub max_adsorption: f64,
    /// Concentration (kg/sm³) at which the linear isotherm reaches its cap.
    pub adsorption_saturation: f64,
    /// kg per reservoir m³ of rock.
    pub rock_density: f64,
    pub dead_pore_space: f64,
    pub rrf: f64,
}

impl Default for PolymerSpec {
    fn default() -> Self {
        Self {
            mixing_omega: 0.65,
            viscosity_factor: 3.0,
            max_adsorption: 7.5e-4,
            adsorption_saturation: 1.0,
            rock_density: 1980.0,
            dead_pore_space: 0.18,
            rrf: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub n_steps: usize,
    pub step_days: f64,
    pub pressure_updates_per_step: usize,
    /// Fraction of the stability limit used for each transport substep.
    pub cfl: f64,
    /// Cap on transport substeps within one control step.
    pub max_substeps: usize,
    /// Water cut above which a producer counts as broken through.
    pub breakthrough_water_cut: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            n_steps: 10,
            step_days: 150.0,
            pressure_updates_per_step: 5,
            cfl: 0.9,
            max_substeps: 100_000,
            breakthrough_water_cut: 0.05,
        }
    }
}

/// Constant-pressure water aquifer attached to every outer face of the grid.
/// With an aquifer, well rates are applied exactly as given and the aquifer
/// absorbs or supplies the difference between injection and production.
/// Without one, the field rate of a step is the smaller of total injection
/// and total production target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AquiferSpec {
    /// Multiplier on the half-cell transmissibility of each boundary face.
    pub strength: f64,
    /// Defaults to the initial reservoir pressure.
    pub pressure_bar: Option<f64>,
}

impl Default for AquiferSpec {
    fn default() -> Self {
        Self { strength: 1.0, pressure_bar: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WellKind {
    Injector,
    Producer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSpec {
    pub name: String,
    pub ix: usize,
    pub iy: usize,
    pub kind: WellKind,
    /// Upper bound of the rate control, sm³/day.
    pub max_rate: f64,
    /// Upper bound of the injected polymer concentration, kg/sm³ (injectors).
    #[serde(default)]
    pub max_concentration: f64,
    /// Reported only.
    pub bhp_limit_bar: f64,
    #[serde(default = "default_well_radius")]
    pub radius_m: f64,
}

fn default_well_radius() -> f64 {
    0.1
}

/// Constant-in-time initial guess per control type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialGuess {
    pub injection_rate: f64,
    pub concentration: f64,
    pub production_rate: f64,
}

impl Default for InitialGuess {
    fn default() -> Self {
        Self { injection_rate: 700.0, concentration: 0.5, production_rate: 150.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlType {
    InjectionRate,
    Concentration,
    ProductionRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deck {
    pub name: String,
    pub grid: GridSpec,
    pub rock: RockSpec,
    #[serde(default)]
    pub fluid: FluidSpec,
    #[serde(default)]
    pub polymer: PolymerSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aquifer: Option<AquiferSpec>,
    pub wells: Vec<WellSpec>,
    #[serde(default)]
    pub initial_guess: InitialGuess,
    #[serde(default)]
    pub economics: EconParams,
}

impl Deck {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let deck: Deck = toml::from_str(s)?;
        deck.validate()?;
        Ok(deck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read deck {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize deck: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.nx == 0 || g.ny == 0 || !(g.dx > 0.0 && g.dy > 0.0 && g.dz > 0.0) {
            return Err(Error::Config("grid needs positive cell counts and sizes".into()));
        }
        let phi = self.rock.porosity.realize(g)?;
        if phi.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("porosity must lie in (0, 1)".into()));
        }
        let k = self.rock.permeability_md.realize(g)?;
        if k.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("permeability must be positive".into()));
        }
        let f = &self.fluid;
        if !(f.mu_water_cp > 0.0 && f.mu_oil_cp > 0.0) {
            return Err(Error::Config("viscosities must be positive".into()));
        }
        if !(f.swr >= 0.0 && f.sor >= 0.0 && f.swr + f.sor < 1.0) {
            return Err(Error::Config("residual saturations must be non-negative with swr + sor < 1".into()));
        }
        if !(f.n_water >= 1.0 && f.n_oil >= 1.0 && f.krw_max > 0.0 && f.kro_max > 0.0) {
            return Err(Error::Config("Corey exponents must be >= 1 and end points positive".into()));
        }
        if !(f.initial_sw >= f.swr && f.initial_sw <= 1.0 - f.sor) {
            return Err(Error::Config("initial water saturation must lie in [swr, 1 - sor]".into()));
        }
        let p = &self.polymer;
        if !(0.0..=1.0).contains(&p.mixing_omega) {
            return Err(Error::Config("mixing parameter must lie in [0, 1]".into()));
        }
        if p.viscosity_factor < 0.0 || p.max_adsorption < 0.0 || p.rock_density < 0.0 || !(p.adsorption_saturation > 0.0) {
            return Err(Error::Config("polymer parameters must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&p.dead_pore_space) || p.rrf < 1.0 {
            return Err(Error::Config("need dead pore space in [0, 1) and rrf >= 1".into()));
        }
        let s = &self.schedule;
        if s.n_steps == 0 || !(s.step_days > 0.0) || s.pressure_updates_per_step == 0 || s.max_substeps == 0 {
            return Err(Error::Config("schedule needs positive step count, length, pressure updates and substep cap".into()));
        }
        if !(s.cfl > 0.0 && s.cfl <= 1.0) {
            return Err(Error::Config("cfl must lie in (0, 1]".into()));
        }
        if let Some(a) = &self.aquifer {
            if !(a.strength > 0.0 && a.strength.is_finite()) || a.pressure_bar.is_some_and(|p| !p.is_finite()) {
                return Err(Error::Config("aquifer strength must be positive and its pressure finite".into()));
            }
        }
        if self.wells.is_empty() {
            return Err(Error::Config("deck has no wells".into()));
        }
        let mut cells = std::collections::HashSet::new();
        for w in &self.wells {
            if w.ix >= g.nx || w.iy >= g.ny {
                return Err(Error::Config(format!("well '{}' lies outside the grid", w.name)));
            }
            if !cells.insert((w.ix, w.iy)) {
                return Err(Error::Config(format!("well '{}' shares its cell with another well", w.name)));
            }
            if !(w.max_rate > 0.0) || !(w.radius_m > 0.0) {
                return Err(Error::Config(format!("well '{}' needs positive rate bound and radius", w.name)));
            }
            if w.kind == WellKind::Injector && !(w.max_concentration > 0.0) {
                return Err(Error::Config(format!("injector '{}' needs a positive concentration bound", w.name)));
            }
        }
        self.economics.validate()?;
        Ok(())
    }

    /// Control types in layout order: for each well, injectors contribute
    /// (rate, concentration) and producers (rate).
    pub fn control_types(&self) -> Vec<(usize, ControlType)> {
        let mut out = Vec::new();
        for (i, w) in self.wells.iter().enumerate() {
            match w.kind {
                WellKind::Injector => {
                    out.push((i, ControlType::InjectionRate));
                    out.push((i, ControlType::Concentration));
                }
                WellKind::Producer => out.push((i, ControlType::ProductionRate)),
            }
        }
        out
    }

    pub fn n_control_types(&self) -> usize {
        self.control_types().len()
    }

    pub fn n_controls(&self) -> usize {
        self.n_control_types() * self.schedule.n_steps
    }

    /// Box constraints per control type: `[0, max_rate]` or `[0, max_concentration]`.
    pub fn control_bounds(&self) -> ControlBounds {
        let upper: Vec<f64> = self
            .control_types()
            .iter()
            .map(|(w, t)| match t {
                ControlType::Concentration => self.wells[*w].max_concentration,
                _ => self.wells[*w].max_rate,
            })
            .collect();
        ControlBounds::new(vec![0.0; upper.len()], upper).expect("validated deck has positive bounds")
    }

    /// The deck's initial guess, clipped to the bounds.
    pub fn initial_control(&self) -> Result<ControlVector> {
        let per_type: Vec<f64> = self
            .control_types()
            .iter()
            .map(|(_, t)| match t {
                ControlType::InjectionRate => self.initial_guess.injection_rate,
                ControlType::Concentration => self.initial_guess.concentration,
                ControlType::ProductionRate => self.initial_guess.production_rate,
            })
            .collect();
        ControlVector::constant(&per_type, self.schedule.n_steps)?.project(&self.control_bounds())
    }

    /// 25×25 heterogeneous five-spot: one central injector and four producers.
    pub fn five_spot_demo() -> Self {
        let grid = GridSpec { nx: 25, ny: 25, dx: 20.0, dy: 20.0, dz: 30.0 };
        let producer = |name: &str, ix, iy| WellSpec {
            name: name.into(),
            ix,
            iy,
            kind: WellKind::Producer,
            max_rate: 500.0,
            max_concentration: 0.0,
            bhp_limit_bar: 150.0,
            radius_m: 0.1,
        };
        Deck {
            name: "five-spot-25".into(),
            grid,
            rock: RockSpec {
                porosity: FieldSpec::LogNormal { median: 0.3, log_std: 0.1, smoothing: 2, seed: 20_231, min: Some(0.15), max: Some(0.4) },
                permeability_md: FieldSpec::LogNormal {
                    median: 200.0,
                    log_std: 0.8,
                    smoothing: 2,
                    seed: 20_231,
                    min: Some(5.0),
                    max: Some(5000.0),
                },
            },
            fluid: FluidSpec::default(),
            polymer: PolymerSpec::default(),
            schedule: ScheduleSpec::default(),
            aquifer: Some(AquiferSpec { strength: 0.01, pressure_bar: None }),
            wells: vec![
                WellSpec {
                    name: "INJ".into(),
                    ix: 12,
                    iy: 12,
                    kind: WellKind::Injector,
                    max_rate: 2000.0,
                    max_concentration: 2.5,
                    bhp_limit_bar: 500.0,
                    radius_m: 0.1,
                },
                producer("P1", 2, 2),
                producer("P2", 22, 2),
                producer("P3", 2, 22),
                producer("P4", 22, 22),
            ],
            initial_guess: InitialGuess::default(),
            economics: EconParams::default(),
        }
    }

    /// Homogeneous 1D waterflood (injector in the first cell, producer in the
    /// last) with `nx` cells over a fixed length of 500 m.
    pub fn waterflood_1d(nx: usize) -> Self {
        let length = 500.0;
        Deck {
            name: format!("waterflood-1d-{nx}"),
            grid: GridSpec { nx, ny: 1, dx: length / nx as f64, dy: 20.0, dz: 10.0 },
            rock: RockSpec {
                porosity: FieldSpec::Constant { value: 0.25 },
                permeability_md: FieldSpec::Constant { value: 300.0 },
            },
            fluid: FluidSpec::default(),
            polymer: PolymerSpec::default(),
            schedule: ScheduleSpec { n_steps: 10, step_days: 30.0, ..ScheduleSpec::default() },
            aquifer: None,
            wells: vec![
                WellSpec {
                    name: "INJ".into(),
                    ix: 0,
                    iy: 0,
                    kind: WellKind::Injector,
                    max_rate: 100.0,
                    max_concentration: 2.5,
                    bhp_limit_bar: 500.0,
                    radius_m: 0.1,
                },
                WellSpec {
                    name: "PROD".into(),
                    ix: nx - 1,
                    iy: 0,
                    kind: WellKind::Producer,
                    max_rate: 100.0,
                    max_concentration: 0.0,
                    bhp_limit_bar: 150.0,
                    radius_m: 0.1,
                },
            ],
            initial_guess: InitialGuess { injection_rate: 50.0, concentration: 0.0, production_rate: 50.0 },
            economics: EconParams::default(),
        }
    }
}
