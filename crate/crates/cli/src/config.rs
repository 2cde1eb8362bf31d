//! Run configuration: one TOML document per experiment.
//!
//! ```toml
//! algorithm = "aml-enopt-v"
//! seed = 7
//! out_dir = "runs/aml-v"
//! baseline = "runs/fom"
//!
//! [objective]
//! deck = "../decks/five_spot_25.toml"
//!
//! [initial_guess]
//! injection_rate = 700.0
//!
//! [enopt]
//! sample_size = 50
//!
//! [aml]
//! outer_tolerance = 1e-2
//! ```
//!
//! Relative paths are resolved against the directory of the config file and
//! stored as absolute paths.
//! EnOpt settings live in `[enopt]` for every algorithm; the adaptive loop
//! copies them into its outer and inner runs.

use std::path::{Component, Path, PathBuf};

use adaptive_enopt::aml::{AmlConfig, Construction};
use adaptive_enopt::controls::{scale_to_unit, ControlBounds, ControlVector};
use adaptive_enopt::reservoir::{analytic_by_name, make_scaled_fom_objective, ControlType, Deck, WellKind};
use adaptive_enopt::{EnOptConfig, Objective};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    FomEnopt,
    AmlEnoptS,
    AmlEnoptV,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::FomEnopt => "fom-enopt",
            Algorithm::AmlEnoptS => "aml-enopt-s",
            Algorithm::AmlEnoptV => "aml-enopt-v",
        }
    }

    pub fn construction(self) -> Option<Construction> {
        match self {
            Algorithm::FomEnopt => None,
            Algorithm::AmlEnoptS => Some(Construction::DnnS),
            Algorithm::AmlEnoptV => Some(Construction::DnnV),
        }
    }
}

/// Exactly one of `deck`, `builtin` and `analytic` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deck: Option<PathBuf>,
    /// `five-spot` or `waterflood-1d`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    /// One of the analytic benchmark names.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic: Option<String>,
    /// Layout of analytic objectives.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_types: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
}

/// Per-control-type constants. For decks the named fields override the
/// deck's own guess (physical units); `constants` gives one value per control
/// type in layout order and takes precedence. Analytic objectives start at the
/// box midpoint unless `constants` is set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialGuessSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injection_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concentration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub production_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Artifact directory of a finished run to report speedups against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<PathBuf>,
    /// Worker threads for concurrent evaluations; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub initial_guess: InitialGuessSpec,
    #[serde(default = "default_enopt")]
    pub enopt: EnOptConfig,
    #[serde(default = "default_aml")]
    pub aml: AmlConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// EnOpt defaults of the experiments.
pub fn default_enopt() -> EnOptConfig {
    AmlConfig::default().enopt
}

pub fn default_aml() -> AmlConfig {
    AmlConfig::default()
}

/// `given` on top of `defaults`, recursing into sub-tables so that a partial
/// section keeps the experiment defaults for every key it leaves out. Tagged
/// tables (with a `kind` key) are replaced whole.
fn overlay(mut defaults: toml::Table, given: toml::Table) -> toml::Table {
    for (key, value) in given {
        let merged = match (defaults.remove(&key), value) {
            (Some(toml::Value::Table(d)), toml::Value::Table(g)) if !g.contains_key("kind") => toml::Value::Table(overlay(d, g)),
            (_, v) => v,
        };
        defaults.insert(key, merged);
    }
    defaults
}

/// Drops `.` and folds `..` lexically.
fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir if out.file_name().is_some() => {
                out.pop();
            }
            c => out.push(c),
        }
    }
    out
}

/// What the optimizer works on: the objective, its box and the start point.
pub struct Problem {
    pub objective: Objective,
    pub bounds: ControlBounds,
    pub initial: ControlVector,
    /// Present for reservoir objectives; controls are then unit-scaled.
    pub deck: Option<Deck>,
    pub labels: Vec<String>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> CliResult<Self> {
        let parse_err = |e: toml::de::Error| CliError::Parse { path: path.into(), message: e.to_string() };
        let mut table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        for (key, defaults) in [("enopt", toml::Table::try_from(default_enopt())), ("aml", toml::Table::try_from(default_aml()))] {
            let defaults = defaults.map_err(|e| CliError::Config(format!("cannot serialize defaults: {e}")))?;
            if let Some(toml::Value::Table(given)) = table.get_mut(key) {
                *given = overlay(defaults, std::mem::take(given));
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(parse_err)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let join = |p: &mut PathBuf| {
            let joined = if p.is_relative() { dir.join(&*p) } else { p.clone() };
            *p = normalize(&std::path::absolute(&joined).unwrap_or(joined));
        };
        join(&mut self.out_dir);
        if let Some(b) = self.baseline.as_mut() {
            join(b);
        }
        if let Some(d) = self.objective.deck.as_mut() {
            join(d);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let o = &self.objective;
        let set = [o.deck.is_some(), o.builtin.is_some(), o.analytic.is_some()].iter().filter(|b| **b).count();
        if set != 1 {
            return Err(CliError::Config("[objective] needs exactly one of deck, builtin or analytic".into()));
        }
        if o.analytic.is_none() && (o.n_types.is_some() || o.n_steps.is_some()) {
            return Err(CliError::Config("n_types and n_steps only apply to analytic objectives".into()));
        }
        if let Some(d) = &o.deck {
            if !d.is_file() {
                return Err(CliError::Config(format!("deck file {} does not exist", d.display())));
            }
        }
        if let Some(b) = &self.baseline {
            if !b.join(crate::artifacts::TRACE_FILE).is_file() {
                return Err(CliError::Config(format!("baseline {} has no trace file", b.display())));
            }
        }
        if self.aml.enopt != AmlConfig::default().enopt {
            return Err(CliError::Config("put EnOpt settings in [enopt], not [aml.enopt]".into()));
        }
        self.enopt.validate()?;
        if self.algorithm != Algorithm::FomEnopt {
            self.aml_config().validate()?;
        }
        Ok(())
    }

    /// EnOpt settings with the run seed applied.
    pub fn enopt_config(&self) -> EnOptConfig {
        EnOptConfig { rng_seed: self.seed, ..self.enopt.clone() }
    }

    /// Adaptive-loop settings with `[enopt]` and the run seed applied.
    pub fn aml_config(&self) -> AmlConfig {
        let mut aml = self.aml.clone();
        aml.enopt = self.enopt_config();
        aml.trainer.rng_seed = self.seed;
        if let Some(c) = self.algorithm.construction() {
            aml.construction = c;
        }
        aml
    }

    pub fn load_deck(&self) -> CliResult<Option<Deck>> {
        let o = &self.objective;
        if let Some(path) = &o.deck {
            return Ok(Some(Deck::load(path)?));
        }
        match o.builtin.as_deref() {
            None => Ok(None),
            Some(name) => builtin_deck(name).map(Some),
        }
    }

    /// Builds the objective, its bounds and the initial control.
    pub fn problem(&self) -> CliResult<Problem> {
        self.validate()?;
        let guess = &self.initial_guess;
        if let Some(mut deck) = self.load_deck()? {
            if let Some(v) = guess.injection_rate {
                deck.initial_guess.injection_rate = v;
            }
            if let Some(v) = guess.concentration {
                deck.initial_guess.concentration = v;
            }
            if let Some(v) = guess.production_rate {
                deck.initial_guess.production_rate = v;
            }
            let physical_bounds = deck.control_bounds();
            let start = match &guess.constants {
                Some(c) => constant_control(c, deck.n_control_types(), deck.schedule.n_steps)?,
                None => deck.initial_control()?,
            };
            if !start.is_feasible(&physical_bounds) {
                return Err(CliError::Config("initial guess lies outside the control bounds".into()));
            }
            let (objective, bounds) = make_scaled_fom_objective(&deck)?;
            let initial = ControlVector::new(scale_to_unit(&start, &physical_bounds)?, deck.n_control_types(), deck.schedule.n_steps)?;
            let labels = deck_labels(&deck);
            return Ok(Problem { objective, bounds, initial, deck: Some(deck), labels });
        }
        let name = self.objective.analytic.as_deref().expect("validated");
        let (n_types, n_steps) = (self.objective.n_types.unwrap_or(2), self.objective.n_steps.unwrap_or(3));
        let analytic = analytic_by_name(name, n_types, n_steps)?;
        let bounds = analytic.bounds();
        let initial = match &guess.constants {
            Some(c) => constant_control(c, n_types, n_steps)?,
            None => {
                let mid: Vec<f64> = bounds.lower().iter().zip(bounds.upper()).map(|(l, u)| 0.5 * (l + u)).collect();
                ControlVector::constant(&mid, n_steps)?
            }
        };
        if guess.injection_rate.is_some() || guess.concentration.is_some() || guess.production_rate.is_some() {
            return Err(CliError::Config("named initial rates only apply to reservoir decks".into()));
        }
        if !initial.is_feasible(&bounds) {
            return Err(CliError::Config("initial guess lies outside the control bounds".into()));
        }
        let labels = (0..n_types).map(|t| format!("u{t}")).collect();
        Ok(Problem { objective: analytic.into_objective(), bounds, initial, deck: None, labels })
    }
}

fn constant_control(c: &[f64], n_types: usize, n_steps: usize) -> CliResult<ControlVector> {
    if c.len() != n_types {
        return Err(CliError::Config(format!("initial_guess.constants has {} entries, expected {n_types}", c.len())));
    }
    Ok(ControlVector::constant(c, n_steps)?)
}

pub fn builtin_deck(name: &str) -> CliResult<Deck> {
    match name {
        "five-spot" => Ok(Deck::five_spot_demo()),
        "waterflood-1d" => Ok(Deck::waterflood_1d(100)),
        other => Err(CliError::Config(format!("unknown builtin deck '{other}' (known: five-spot, waterflood-1d)"))),
    }
}

/// Column labels of the control layout, e.g. `INJ.rate`, `INJ.conc`, `P1.rate`.
pub fn deck_labels(deck: &Deck) -> Vec<String> {
    deck.control_types()
        .iter()
        .map(|(w, t)| {
            let suffix = match t {
                ControlType::Concentration => "conc",
                _ => "rate",
            };
            debug_assert!(matches!(deck.wells[*w].kind, WellKind::Injector | WellKind::Producer));
            format!("{}.{suffix}", deck.wells[*w].name)
        })
        .collect()
}
