//! The `run`, `compare`, `validate-deck` and `emit-plots` verbs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptive_enopt::aml::{aml_enopt_detailed, certify, CertificationReport};
use adaptive_enopt::controls::unscale_from_unit;
use adaptive_enopt::enopt::{run_session, EnOptSession};
use adaptive_enopt::reservoir::{npv, production_table, Deck, Simulator};
use adaptive_enopt::surrogate::SurrogateModel;
use adaptive_enopt::trace::IterationTrace;
use log::info;

use crate::artifacts::*;
use crate::config::{deck_labels, Algorithm, RunConfig};
use crate::error::{io_err, CliError, CliResult};

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub trace: IterationTrace,
    pub timing: Timing,
    pub summary: Summary,
    pub certification: CertificationReport,
}

/// Runs `f` on a pool of `workers` threads (all cores when 0).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Workers(e.to_string()))?;
    Ok(pool.install(f))
}

/// Executes the configured algorithm and writes every artifact into
/// `config.out_dir`. While running, and after a failure, the directory holds
/// an `INCOMPLETE` marker with the diagnostic.
pub fn run(config: &RunConfig) -> CliResult<RunOutcome> {
    config.validate()?;
    let dir = config.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(&dir, INCOMPLETE_MARKER, "running\n")?;
    let result = with_workers(config.workers, || execute(config, &dir)).and_then(|r| r);
    match result {
        Ok(outcome) => {
            std::fs::remove_file(dir.join(INCOMPLETE_MARKER)).map_err(io_err(dir.join(INCOMPLETE_MARKER)))?;
            Ok(outcome)
        }
        Err(e) => {
            let _ = write_file(&dir, INCOMPLETE_MARKER, &format!("{e}\n"));
            Err(e)
        }
    }
}

fn execute(config: &RunConfig, dir: &Path) -> CliResult<RunOutcome> {
    let problem = config.problem()?;
    write_file(dir, CONFIG_FILE, &config.to_toml_string()?)?;
    let start = Instant::now();
    info!("{} on {} ({} controls)", config.algorithm.label(), problem.objective.name(), problem.initial.len());
    let (control, trace, model): (Vec<f64>, IterationTrace, Option<SurrogateModel>) = match config.algorithm {
        Algorithm::FomEnopt => {
            let ecfg = config.enopt_config();
            let mut session = EnOptSession::new(&problem.objective, &problem.bounds, &ecfg)?;
            let r = run_session(&mut session, &problem.initial, Algorithm::FomEnopt.label())?;
            (r.control.into_values(), r.trace, None)
        }
        Algorithm::AmlEnoptS | Algorithm::AmlEnoptV => {
            let r = aml_enopt_detailed(&problem.objective, &problem.initial, &config.aml_config(), &problem.bounds)?;
            (r.control.into_values(), r.trace, r.last_model)
        }
    };
    let total_time_s = start.elapsed().as_secs_f64();
    let timing = Timing { row_wall_time_s: trace.records.iter().map(|r| r.wall_time_s).collect(), total_time_s };
    info!("{} after {} FOM evaluations ({total_time_s:.1} s)", trace.termination.label(), trace.total_fom_evaluations());

    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf)?;
    std::fs::write(dir.join(TRACE_FILE), &buf).map_err(io_err(dir.join(TRACE_FILE)))?;
    write_file(dir, TIMING_FILE, &serde_json::to_string_pretty(&timing).expect("plain data"))?;

    let certification = certify(&trace);
    write_file(dir, CERTIFICATION_FILE, &serde_json::to_string_pretty(&certification).expect("plain data"))?;
    if let Some(m) = &model {
        m.save(&dir.join(MODEL_FILE))?;
    }

    let n_types = problem.initial.n_wells();
    match &problem.deck {
        Some(deck) => {
            let physical = unscale_from_unit(&control, &deck.control_bounds())?;
            let table = controls_table(physical.values(), n_types, &problem.labels, Some(deck.schedule.step_days));
            write_file(dir, CONTROLS_FILE, &table)?;
            let result = Simulator::new(deck.clone())?.simulate(&physical)?;
            write_file(dir, PRODUCTION_FILE, &production_table(&result, &deck.economics))?;
        }
        None => write_file(dir, CONTROLS_FILE, &controls_table(&control, n_types, &problem.labels, None))?,
    }

    let baseline = match &config.baseline {
        Some(b) => Some(read_run(b)?),
        None => None,
    };
    let summary = summarize(&trace, &timing, baseline.as_ref().map(|(t, s)| (t, s)))?;
    write_file(dir, SUMMARY_TSV, &summary_table(std::slice::from_ref(&summary)))?;
    write_file(dir, SUMMARY_JSON, &serde_json::to_string_pretty(&summary).expect("plain data"))?;
    Ok(RunOutcome { dir: dir.to_path_buf(), trace, timing, summary, certification })
}

/// Side-by-side summary of two finished runs; `run_a` is the baseline.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline: Summary,
    pub candidate: Summary,
}

impl Comparison {
    pub fn npv_ratio(&self) -> f64 {
        self.candidate.npv_ratio.expect("set by compare")
    }

    pub fn evaluation_ratio(&self) -> f64 {
        self.candidate.evaluation_ratio.expect("set by compare")
    }

    pub fn speedup(&self) -> f64 {
        self.candidate.speedup.expect("set by compare")
    }

    pub fn report(&self) -> String {
        let mut s = summary_table(&[self.baseline.clone(), self.candidate.clone()]);
        let _ = writeln!(s, "\nNPV ratio\t{:.6}", self.npv_ratio());
        let _ = writeln!(s, "FOM evaluation ratio\t{:.4}", self.evaluation_ratio());
        let _ = writeln!(s, "wall-time speedup\t{:.4}", self.speedup());
        s
    }
}

pub fn compare(run_a: &Path, run_b: &Path) -> CliResult<Comparison> {
    let (ta, sa) = read_run(run_a)?;
    let (tb, sb) = read_run(run_b)?;
    let baseline = summarize(&ta, &sa, Some((&ta, &sa)))?;
    let candidate = summarize(&tb, &sb, Some((&ta, &sa)))?;
    Ok(Comparison { baseline, candidate })
}

/// Deck statistics plus one simulation at the deck's initial guess.
pub fn validate_deck(path: &Path) -> CliResult<String> {
    let deck = Deck::load(path)?;
    let sim = Simulator::new(deck.clone())?;
    let u = deck.initial_control()?;
    let result = sim.simulate(&u)?;
    let (value, _) = npv(&result, &deck.economics)?;
    let pore_volume: f64 = sim.porosity().iter().sum::<f64>() * deck.grid.cell_volume();
    let mut s = String::new();
    let _ = writeln!(s, "deck\t{}", deck.name);
    let _ = writeln!(s, "cells\t{} x {}", deck.grid.nx, deck.grid.ny);
    let _ = writeln!(s, "pore_volume_rm3\t{pore_volume:.6e}");
    let _ = writeln!(s, "wells\t{}", deck.wells.len());
    let _ = writeln!(s, "controls\t{} ({} per step: {})", deck.n_controls(), deck.n_control_types(), deck_labels(&deck).join(", "));
    let _ = writeln!(s, "aquifer\t{}", if deck.aquifer.is_some() { "yes" } else { "no" });
    let _ = writeln!(s, "initial_npv\t{value:.6e}");
    let _ = writeln!(s, "water_residual\t{:.3e}", result.water_residual);
    let _ = writeln!(s, "polymer_residual\t{:.3e}", result.polymer_residual);
    let _ = writeln!(s, "substeps\t{}", result.substeps);
    Ok(s)
}

pub const CONVERGENCE_FILE: &str = "convergence.tsv";
pub const CUMULATIVE_NPV_FILE: &str = "cumulative_npv.tsv";

/// Writes plot-ready tables for every run directory into `out`: objective
/// versus FOM evaluations per run, returned controls per run and, for deck
/// runs, the cumulative discounted cash flow over time.
pub fn emit_plots(runs: &[PathBuf], out: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut convergence = String::from("run\talgorithm\titeration\tfom_evaluations\tfom_value\tsurrogate_value\taccepted\n");
    let mut cumulative = String::from("run\ttime_days\tcumulative_npv\n");
    let mut written = Vec::new();
    for dir in runs {
        let (trace, _) = read_run(dir)?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        for r in &trace.records {
            let _ = writeln!(
                convergence,
                "{name}\t{}\t{}\t{}\t{}\t{}\t{}",
                trace.header.algorithm,
                r.iteration,
                r.fom_evaluations,
                r.fom_value,
                r.surrogate_value.map_or_else(|| "-".into(), |v| v.to_string()),
                r.accepted
            );
        }
        let controls = dir.join(CONTROLS_FILE);
        let target = out.join(format!("controls_{name}.tsv"));
        std::fs::copy(&controls, &target).map_err(io_err(&controls))?;
        written.push(target);
        let production = dir.join(PRODUCTION_FILE);
        if production.is_file() {
            let text = std::fs::read_to_string(&production).map_err(io_err(&production))?;
            let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
            let econ = cfg.load_deck()?.map(|d| d.economics).unwrap_or_default();
            let mut total = 0.0;
            for line in text.lines().skip(1) {
                let cols: Vec<f64> = line.split('\t').filter_map(|c| c.parse().ok()).collect();
                let (t, j) = (cols[0], cols[cols.len() - 1]);
                total += j * (1.0 + econ.d_tau).powf(-t / econ.tau);
                let _ = writeln!(cumulative, "{name}\t{t}\t{total}");
            }
        }
    }
    for (file, text) in [(CONVERGENCE_FILE, &convergence), (CUMULATIVE_NPV_FILE, &cumulative)] {
        write_file(out, file, text)?;
        written.push(out.join(file));
    }
    Ok(written)
}
