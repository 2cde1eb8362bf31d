//! Append-only optimizer traces and their line-delimited JSON form.
//!
//! The file form is one header line, one line per iteration and one end line.
//! Wall-clock times are kept in memory only, so that traces of identical runs
//! are byte-identical.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Termination {
    /// EnOpt stopping criterion: the last iterate did not improve by more than ε.
    Converged,
    /// Adaptive loop: the FOM step at the current iterate found no sufficient increase.
    FomStationary,
    /// Adaptive loop: the surrogate-optimal candidate failed the FOM acceptance test.
    SurrogateStepRejected { iteration: usize },
    MaxIterations,
    /// The ensemble cross-covariance vanished.
    StationaryEnsemble,
    /// The run aborted before reaching a stopping criterion.
    Incomplete { reason: String },
}

impl Termination {
    pub fn label(&self) -> String {
        match self {
            Termination::Converged => "converged".into(),
            Termination::FomStationary => "FOM-stationary".into(),
            Termination::SurrogateStepRejected { iteration } => format!("surrogate-step-rejected at {iteration}"),
            Termination::MaxIterations => "max-iterations".into(),
            Termination::StationaryEnsemble => "stationary-ensemble".into(),
            Termination::Incomplete { reason } => format!("incomplete: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Outer iteration index `k` of the iterate `u_k`.
    pub iteration: usize,
    pub control: Vec<f64>,
    /// Objective (FOM) value at `u_k`.
    pub fom_value: f64,
    /// Value at the trial point of the FOM step taken from `u_k` (adaptive loop only).
    pub trial_value: Option<f64>,
    /// Surrogate prediction at `u_k` by the surrogate that produced it.
    pub surrogate_value: Option<f64>,
    /// Inner EnOpt iterations spent to produce `u_k`.
    pub inner_iterations: usize,
    /// Cumulative objective (FOM) evaluations when this row was written.
    pub fom_evaluations: u64,
    /// Cumulative surrogate evaluations when this row was written.
    pub surrogate_evaluations: u64,
    /// Divisor applied to value differences before comparing with tolerances.
    pub value_scale: f64,
    /// Divisor used when `trial_value` was compared with `fom_value`, if it
    /// differs from `value_scale` because new values were seen in between.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_scale: Option<f64>,
    /// Whether the row passed its improvement test against the last accepted row.
    pub accepted: bool,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub algorithm: String,
    pub objective: String,
    pub dimension: usize,
    /// ε for EnOpt, ε_o for the adaptive loop.
    pub tolerance: f64,
    pub inner_tolerance: Option<f64>,
    pub max_iterations: usize,
    pub max_inner_iterations: Option<usize>,
    pub sample_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Line {
    Header(TraceHeader),
    Iteration(TraceRecord),
    End { termination: Termination },
}

impl IterationTrace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
            termination: Termination::Incomplete { reason: "running".into() },
        }
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Last row that passed its acceptance test: the control the run returns.
    pub fn final_accepted(&self) -> Option<&TraceRecord> {
        self.records.iter().rev().find(|r| r.accepted)
    }

    /// Row with the largest objective value among all evaluated iterates.
    pub fn best(&self) -> Option<&TraceRecord> {
        self.records.iter().fold(None, |best: Option<&TraceRecord>, r| match best {
            Some(b) if b.fom_value >= r.fom_value => Some(b),
            _ => Some(r),
        })
    }

    pub fn total_fom_evaluations(&self) -> u64 {
        self.records.last().map_or(0, |r| r.fom_evaluations)
    }

    pub fn total_surrogate_evaluations(&self) -> u64 {
        self.records.last().map_or(0, |r| r.surrogate_evaluations)
    }

    pub fn total_inner_iterations(&self) -> usize {
        self.records.iter().map(|r| r.inner_iterations).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", serde_json::to_string(&Line::Header(self.header.clone()))?)?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(&Line::Iteration(r.clone()))?)?;
        }
        writeln!(w, "{}", serde_json::to_string(&Line::End { termination: self.termination.clone() })?)?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        let mut termination = None;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line).map_err(|e| Error::Parse(format!("trace line {}: {e}", n + 1)))? {
                Line::Header(h) => header = Some(h),
                Line::Iteration(rec) => records.push(rec),
                Line::End { termination: t } => termination = Some(t),
            }
        }
        let header = header.ok_or_else(|| Error::Parse("trace has no header line".into()))?;
        let termination = termination.unwrap_or(Termination::Incomplete { reason: "trace truncated".into() });
        Ok(Self { header, records, termination })
    }
}
