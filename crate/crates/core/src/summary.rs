//! Reads a finished run back from disk, re-checks it and renders the
//! survivor table and the elimination curve.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::artifacts::{self, SettingsRow, TraceFile};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Summary {
    pub rows: Vec<SettingsRow>,
    pub trace: TraceFile,
    /// Surviving rows, ascending cumulative cost, ties by index.
    pub survivors: Vec<SettingsRow>,
    /// `(batch, eliminated, excluded_total)`.
    pub curve: Vec<(usize, usize, usize)>,
    pub curve_path: PathBuf,
}

impl Summary {
    pub fn exit_code(&self) -> i32 {
        if self.survivors.is_empty() {
            3
        } else {
            0
        }
    }
}

fn inconsistent(path: &Path, message: String) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        message,
    }
}

/// Loads `settings.csv` and `trace.json` from `dir`, validates them
/// against each other and writes `elimination_curve.csv` next to them.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let settings_path = dir.join(artifacts::SETTINGS_FILE);
    let trace_path = dir.join(artifacts::TRACE_FILE);
    let rows = artifacts::read_settings(&settings_path)?;
    let trace = artifacts::read_trace(&trace_path)?;
    let bounds = trace.config.design_bounds();

    for (i, row) in rows.iter().enumerate() {
        if let Some(d) = row.design() {
            d.validate(&bounds)
                .map_err(|e| inconsistent(&settings_path, format!("line {}: {e}", i + 2)))?;
        }
        if row.is_surviving() && row.design().is_none() {
            return Err(inconsistent(&settings_path, format!("line {}: surviving row without a design", i + 2)));
        }
    }

    let mut survivors: Vec<SettingsRow> = rows.iter().filter(|r| r.is_surviving()).cloned().collect();
    let cost = |r: &SettingsRow| r.cumulative_cost.unwrap_or(f64::INFINITY);
    survivors.sort_by(|a, b| cost(a).total_cmp(&cost(b)).then(a.index.cmp(&b.index)));
    match (survivors.first(), &trace.best) {
        (Some(first), Some(best)) if first.index == best.index => {}
        (None, None) => {}
        (first, best) => {
            return Err(inconsistent(
                &trace_path,
                format!(
                    "best setting {:?} disagrees with the cheapest survivor {:?}",
                    best.as_ref().map(|b| b.index),
                    first.map(|r| r.index)
                ),
            ))
        }
    }

    let curve = artifacts::elimination_curve(&trace);
    if let Some(w) = curve.windows(2).find(|w| w[1].1 < w[0].1) {
        return Err(inconsistent(&trace_path, format!("elimination trace decreases at batch {}", w[1].0)));
    }
    let curve_path = dir.join(artifacts::CURVE_FILE);
    artifacts::write_curve(&curve_path, &curve)?;

    Ok(Summary {
        rows,
        trace,
        survivors,
        curve,
        curve_path,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Fixed-width survivor table.
pub fn render_table(summary: &Summary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>22} {:>6} {:>5} {:>7} {:>6} {:>7} {:>9} {:>11} {:>8} {:>7} {:>7} {:>14}",
        "index", "sigma", "alpha", "kappa", "mu_d", "N_pred", "n_contr", "rho_f", "rho_constr", "max_iter", "tau_u", "T", "cost"
    );
    if summary.survivors.is_empty() {
        let _ = writeln!(s, "no admissible setting");
    }
    for r in &summary.survivors {
        let _ = writeln!(
            s,
            "{:>5} {:>22} {:>6} {:>5} {:>7} {:>6} {:>7} {:>9} {:>11} {:>8} {:>7} {:>7} {:>14}",
            r.index,
            r.sigma,
            opt(r.alpha_hat.map(|a| format!("{a:.4}"))),
            opt(r.kappa),
            opt(r.mu_d.map(|v| format!("{v:.4}"))),
            opt(r.n_pred),
            opt(r.n_contr),
            opt(r.rho_f.map(|v| format!("{v:.2}"))),
            opt(r.rho_constr.map(|v| format!("{v:.4e}"))),
            opt(r.max_iter),
            opt(r.tau_u.map(|v| format!("{v:.3}"))),
            opt(r.horizon.map(|v| format!("{v:.3}"))),
            opt(r.cumulative_cost.map(|v| format!("{v:.6e}"))),
        );
    }
    let _ = writeln!(s, "candidates: {}  survivors: {}", summary.rows.len(), summary.survivors.len());
    let _ = writeln!(s, "excluded after each batch: {:?}", summary.curve.iter().map(|c| c.2).collect::<Vec<_>>());
    s
}
