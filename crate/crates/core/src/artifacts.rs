//! On-disk formats: `settings.csv`, `trace.json`, `elimination_curve.csv`.
//!
//! `settings.csv` has one row per candidate with the fixed header
//! [`SETTINGS_HEADER`]. Absent values (no alpha for an infeasible
//! candidate, no elimination for a survivor) are empty fields. Floats use
//! the shortest representation that round-trips.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::design::DesignVector;
use crate::error::{Error, Result};
use crate::tuner::{BestSetting, CandidateStatus, Criterion, TuningResult};

pub const SETTINGS_FILE: &str = "settings.csv";
pub const TRACE_FILE: &str = "trace.json";
pub const RUN_LOG_FILE: &str = "run.log";
pub const CURVE_FILE: &str = "elimination_curve.csv";
pub const REPORTS_DIR: &str = "reports";

pub const SETTINGS_HEADER: [&str; 17] = [
    "index",
    "status",
    "sigma",
    "alpha_hat",
    "kappa",
    "mu_d",
    "N_pred",
    "n_contr",
    "rho_f",
    "rho_constr",
    "max_iter",
    "tau_u",
    "T",
    "cumulative_cost",
    "scenarios_evaluated",
    "elimination_batch",
    "elimination_criterion",
];

/// One row of `settings.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingsRow {
    pub index: usize,
    pub status: String,
    pub sigma: String,
    pub alpha_hat: Option<f64>,
    pub kappa: Option<u32>,
    pub mu_d: Option<f64>,
    #[serde(rename = "N_pred")]
    pub n_pred: Option<u32>,
    pub n_contr: Option<u32>,
    pub rho_f: Option<f64>,
    pub rho_constr: Option<f64>,
    pub max_iter: Option<u32>,
    pub tau_u: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub cumulative_cost: Option<f64>,
    pub scenarios_evaluated: usize,
    pub elimination_batch: Option<usize>,
    pub elimination_criterion: Option<String>,
}

impl SettingsRow {
    pub fn design(&self) -> Option<DesignVector> {
        Some(DesignVector {
            kappa: self.kappa?,
            mu_d: self.mu_d?,
            n_pred: self.n_pred?,
            n_contr: self.n_contr?,
            rho_f: self.rho_f?,
            rho_constr: self.rho_constr?,
            max_iter: self.max_iter?,
        })
    }

    pub fn is_surviving(&self) -> bool {
        self.status == CandidateStatus::Surviving.label()
    }
}

pub fn settings_rows(result: &TuningResult, tau: f64) -> Vec<SettingsRow> {
    result
        .records
        .iter()
        .map(|r| {
            let d = r.design;
            let (batch, criterion) = match r.status {
                CandidateStatus::Surviving => (None, None),
                // the initial set is batch 1
                CandidateStatus::InfeasibleAtA0 { criterion } => (Some(1), Some(criterion)),
                CandidateStatus::Eliminated { batch, criterion } => (Some(batch), Some(criterion)),
            };
            SettingsRow {
                index: r.index,
                status: r.status.label().to_string(),
                sigma: r.sigma.to_string(),
                alpha_hat: r.alpha_hat,
                kappa: d.map(|d| d.kappa),
                mu_d: d.map(|d| d.mu_d),
                n_pred: d.map(|d| d.n_pred),
                n_contr: d.map(|d| d.n_contr),
                rho_f: d.map(|d| d.rho_f),
                rho_constr: d.map(|d| d.rho_constr),
                max_iter: d.map(|d| d.max_iter),
                tau_u: d.map(|d| d.tau_u(tau)),
                horizon: d.map(|d| d.horizon(tau)),
                cumulative_cost: r.cumulative_cost,
                scenarios_evaluated: r.scenarios_evaluated,
                elimination_batch: batch,
                elimination_criterion: criterion.map(|c: Criterion| c.to_string()),
            }
        })
        .collect()
}

pub fn write_settings(path: &Path, rows: &[SettingsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(SETTINGS_HEADER).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `settings.csv`, checking the header and reporting bad rows by
/// their 1-based line number.
pub fn read_settings(path: &Path) -> Result<Vec<SettingsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(SETTINGS_HEADER.iter().copied()) {
        return Err(artifact(path, format!("line 1: unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<SettingsRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| artifact(path, format!("line {line}: {e}")))?;
        if let Some(c) = &row.elimination_criterion {
            c.parse::<Criterion>().map_err(|e| artifact(path, format!("line {line}: {e}")))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Seeds needed to replay any part of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    /// Candidate `j` draws its shaping vector from stream `j` of this seed.
    pub sigma: u64,
    /// Scenario `i` is drawn from stream `i` of this seed.
    pub scenarios: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub elimination_trace: Vec<usize>,
    /// Candidates with no admissible alpha on the initial set.
    pub infeasible_at_a0: usize,
    pub ocp_solve_count: u64,
    pub ocp_solve_bound: u64,
    pub set_evaluations: u64,
    pub step3_rejections: usize,
    pub survivors: Vec<usize>,
    pub best: Option<BestSetting>,
    /// Seconds per stage evaluation when cost-model timing was used.
    pub c_eval: Option<f64>,
    pub seeds: Seeds,
    pub config: RunConfig,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| artifact(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| artifact(path, format!("line {}: {e}", e.line())))
}

/// `(batch, eliminated_in_phase_two, excluded_total)` rows for batches
/// `2..=nb`; `excluded_total` also counts candidates infeasible on the
/// initial set.
pub fn elimination_curve(trace: &TraceFile) -> Vec<(usize, usize, usize)> {
    trace
        .elimination_trace
        .iter()
        .enumerate()
        .map(|(i, &e)| (i + 2, e, e + trace.infeasible_at_a0))
        .collect()
}

pub fn write_curve(path: &Path, curve: &[(usize, usize, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["batch", "eliminated", "excluded_total"]).map_err(|e| csv_error(path, e))?;
    for (b, e, t) in curve {
        w.write_record([b.to_string(), e.to_string(), t.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn artifact(path: &Path, message: impl Into<String>) -> Error {
    Error::Artifact {
        path: PathBuf::from(path),
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| format!("line {}: ", p.line())).unwrap_or_default();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => artifact(path, format!("{line}{other:?}")),
    }
}
