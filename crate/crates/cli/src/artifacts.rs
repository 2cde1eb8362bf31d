//! Files written into a run directory and the summary derived from them.
//!
//! | file | content |
//! |---|---|
//! | `trace.jsonl` | header, one line per iteration, end line with the termination status |
//! | `timing.json` | wall-clock seconds per trace row and for the whole run |
//! | `summary.tsv`, `summary.json` | one-row table derived from the two files above |
//! | `certification.json` | re-check of the trace |
//! | `controls.tsv` | returned control per step, physical units |
//! | `production.tsv` | per-step totals and cash flow at the returned control (decks only) |
//! | `surrogate.json` | last trained network (adaptive runs only) |
//! | `config.toml` | the effective configuration |
//! | `INCOMPLETE` | present while running and after a failure, with the diagnostic |

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::Path;

use adaptive_enopt::trace::{IterationTrace, TraceRecord};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const TIMING_FILE: &str = "timing.json";
pub const SUMMARY_TSV: &str = "summary.tsv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CERTIFICATION_FILE: &str = "certification.json";
pub const CONTROLS_FILE: &str = "controls.tsv";
pub const PRODUCTION_FILE: &str = "production.tsv";
pub const MODEL_FILE: &str = "surrogate.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Wall-clock data kept apart from the trace so that traces stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub row_wall_time_s: Vec<f64>,
    pub total_time_s: f64,
}

/// The summary row: final FOM value, surrogate value, outer and inner
/// iterations, evaluation counts, run time and speedups against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub objective: String,
    pub status: String,
    pub fom_value: f64,
    pub surrogate_value: Option<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub fom_evaluations: u64,
    pub surrogate_evaluations: u64,
    pub total_time_s: f64,
    pub baseline_fom_value: Option<f64>,
    /// Baseline FOM evaluations over ours.
    pub evaluation_ratio: Option<f64>,
    /// Baseline wall time over ours.
    pub speedup: Option<f64>,
    /// Our FOM value over the baseline's.
    pub npv_ratio: Option<f64>,
}

/// Row holding the control a run returns: the last iterate for EnOpt, the
/// last accepted iterate for the adaptive loop.
pub fn returned_record(trace: &IterationTrace) -> Option<&TraceRecord> {
    if trace.header.algorithm == "fom-enopt" {
        trace.last()
    } else {
        trace.final_accepted()
    }
}

pub fn summarize(trace: &IterationTrace, timing: &Timing, baseline: Option<(&IterationTrace, &Timing)>) -> CliResult<Summary> {
    let ret = returned_record(trace).ok_or_else(|| CliError::Config("trace has no rows".into()))?;
    let fom_evaluations = trace.total_fom_evaluations();
    let mut s = Summary {
        algorithm: trace.header.algorithm.clone(),
        objective: trace.header.objective.clone(),
        status: trace.termination.label(),
        fom_value: ret.fom_value,
        surrogate_value: ret.surrogate_value,
        outer_iterations: trace.last().map_or(0, |r| r.iteration),
        inner_iterations: trace.total_inner_iterations(),
        fom_evaluations,
        surrogate_evaluations: trace.total_surrogate_evaluations(),
        total_time_s: timing.total_time_s,
        baseline_fom_value: None,
        evaluation_ratio: None,
        speedup: None,
        npv_ratio: None,
    };
    if let Some((base, base_timing)) = baseline {
        if base.header.objective != trace.header.objective {
            return Err(CliError::Mismatch(format!(
                "objective '{}' vs baseline '{}'",
                trace.header.objective, base.header.objective
            )));
        }
        let b = returned_record(base).ok_or_else(|| CliError::Config("baseline trace has no rows".into()))?;
        s.baseline_fom_value = Some(b.fom_value);
        s.evaluation_ratio = Some(base.total_fom_evaluations() as f64 / fom_evaluations.max(1) as f64);
        s.speedup = Some(base_timing.total_time_s / timing.total_time_s.max(1e-9));
        s.npv_ratio = Some(ret.fom_value / b.fom_value);
    }
    Ok(s)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x}"))
}

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "algorithm",
    "objective",
    "status",
    "fom_value",
    "surrogate_value",
    "outer_iterations",
    "inner_iterations",
    "fom_evaluations",
    "surrogate_evaluations",
    "total_time_s",
    "evaluation_ratio",
    "speedup",
    "npv_ratio",
];

pub fn summary_row(s: &Summary) -> String {
    [
        s.algorithm.clone(),
        s.objective.clone(),
        s.status.clone(),
        format!("{}", s.fom_value),
        opt(s.surrogate_value),
        s.outer_iterations.to_string(),
        s.inner_iterations.to_string(),
        s.fom_evaluations.to_string(),
        s.surrogate_evaluations.to_string(),
        format!("{:.3}", s.total_time_s),
        opt(s.evaluation_ratio),
        opt(s.speedup),
        opt(s.npv_ratio),
    ]
    .join("\t")
}

pub fn summary_table(rows: &[Summary]) -> String {
    let mut out = SUMMARY_COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", summary_row(r));
    }
    out
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(io_err(path))
}

pub fn read_trace(dir: &Path) -> CliResult<IterationTrace> {
    let path = dir.join(TRACE_FILE);
    let file = std::fs::File::open(&path).map_err(io_err(&path))?;
    IterationTrace::read_jsonl(BufReader::new(file)).map_err(|e| CliError::Parse { path, message: e.to_string() })
}

pub fn read_timing(dir: &Path) -> CliResult<Timing> {
    let path = dir.join(TIMING_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse { path, message: e.to_string() })
}

/// Trace and timing of a finished run directory.
pub fn read_run(dir: &Path) -> CliResult<(IterationTrace, Timing)> {
    if dir.join(INCOMPLETE_MARKER).exists() {
        return Err(CliError::Config(format!("run in {} is incomplete", dir.display())));
    }
    Ok((read_trace(dir)?, read_timing(dir)?))
}

/// Physical control per step as a table with `step` and `time_days` columns.
pub fn controls_table(values: &[f64], n_types: usize, labels: &[String], step_days: Option<f64>) -> String {
    let n_steps = values.len() / n_types.max(1);
    let mut out = String::from("step\ttime_days");
    for l in labels {
        out.push('\t');
        out.push_str(l);
    }
    out.push('\n');
    for s in 0..n_steps {
        let t = step_days.map_or_else(|| "-".to_string(), |d| format!("{}", d * s as f64));
        let _ = write!(out, "{s}\t{t}");
        for w in 0..n_types {
            let _ = write!(out, "\t{}", values[adaptive_enopt::controls::layout_index(n_types, w, s)]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptive_enopt::trace::{Termination, TraceHeader};

    pub(crate) fn trace(algorithm: &str, objective: &str, evals: u64, value: f64) -> IterationTrace {
        let mut t = IterationTrace::new(TraceHeader {
            algorithm: algorithm.into(),
            objective: objective.into(),
            dimension: 1,
            tolerance: 1e-6,
            inner_tolerance: None,
            max_iterations: 10,
            max_inner_iterations: None,
            sample_size: 2,
            seed: 0,
        });
        for (k, (v, e)) in [(value - 1.0, 0), (value, evals)].into_iter().enumerate() {
            t.push(TraceRecord {
                iteration: k,
                control: vec![0.5],
                fom_value: v,
                trial_value: None,
                surrogate_value: None,
                inner_iterations: 0,
                fom_evaluations: e,
                surrogate_evaluations: 0,
                value_scale: 1.0,
                trial_scale: None,
                accepted: true,
                wall_time_s: 0.0,
            });
        }
        t.termination = Termination::Converged;
        t
    }

    fn timing(total: f64) -> Timing {
        Timing { row_wall_time_s: vec![0.0, total], total_time_s: total }
    }

    #[test]
    fn ratios_against_baseline() {
        let base = trace("fom-enopt", "fom:demo", 2839, 4.0);
        let cand = trace("aml-enopt-v", "fom:demo", 407, 4.2);
        let s = summarize(&cand, &timing(10.0), Some((&base, &timing(50.0)))).unwrap();
        assert!((s.evaluation_ratio.unwrap() - 2839.0 / 407.0).abs() < 1e-12);
        assert!((s.evaluation_ratio.unwrap() - 6.98).abs() < 5e-3);
        assert_eq!(s.speedup, Some(5.0));
        assert!((s.npv_ratio.unwrap() - 1.05).abs() < 1e-12);
        let same = summarize(&base, &timing(50.0), Some((&base, &timing(50.0)))).unwrap();
        assert_eq!((same.evaluation_ratio, same.speedup, same.npv_ratio), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn mismatched_objectives_are_refused() {
        let a = trace("fom-enopt", "quadratic", 10, 1.0);
        let b = trace("fom-enopt", "linear", 10, 1.0);
        assert!(matches!(summarize(&a, &timing(1.0), Some((&b, &timing(1.0)))), Err(CliError::Mismatch(_))));
    }

    #[test]
    fn table_row_matches_columns() {
        let s = summarize(&trace("fom-enopt", "q", 5, 2.0), &timing(1.0), None).unwrap();
        let t = summary_table(&[s]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].split('\t').count(), lines[1].split('\t').count());
        assert!(lines[1].starts_with("fom-enopt\tq\tconverged\t2\t-\t1\t0\t5\t"));
    }

    #[test]
    fn controls_table_layout() {
        let t = controls_table(&[1.0, 2.0, 3.0, 4.0], 2, &["a".into(), "b".into()], Some(10.0));
        assert_eq!(t, "step\ttime_days\ta\tb\n0\t0\t1\t2\n1\t10\t3\t4\n");
    }

    #[test]
    fn missing_trace_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_run(dir.path()), Err(CliError::Io { .. })));
    }
}
