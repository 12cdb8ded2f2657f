//! Run configuration: a flat TOML table whose keys are the field names of
//! [`RunConfig`].

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::design::{DesignBounds, Interval, PenaltyInterpolation};
use crate::error::{Error, Result};
use crate::tuner::OptimPar;

/// Which clock feeds the real-time criterion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimingKind {
    #[default]
    Wallclock,
    CostModel,
}

impl FromStr for TimingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wallclock" => Ok(Self::Wallclock),
            "cost-model" => Ok(Self::CostModel),
            _ => Err(Error::Config(format!("unknown timing mode `{s}` (expected wallclock or cost-model)"))),
        }
    }
}

impl std::fmt::Display for TimingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Wallclock => "wallclock",
            Self::CostModel => "cost-model",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    /// Number of sampled shaping vectors.
    pub n_trials: usize,
    /// Number of scenario batches; batch 1 is the initial set.
    pub nb: usize,
    /// Scenarios per batch.
    pub nsb: usize,
    /// Optional explicit scenario count; must equal `nb * nsb` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_scenarios: Option<usize>,
    pub sigma_bar: u32,
    pub kappa_min: u32,
    pub kappa_max: u32,
    pub mu_d_min: f64,
    pub mu_d_max: f64,
    pub n_pred_min: u32,
    pub n_pred_max: u32,
    pub n_contr_min: u32,
    pub n_contr_max: u32,
    pub rho_f_min: f64,
    pub rho_f_max: f64,
    pub rho_constr_min: f64,
    pub rho_constr_max: f64,
    pub max_iter_min: u32,
    pub max_iter_max: u32,
    pub penalty_interpolation: PenaltyInterpolation,
    pub gamma: f64,
    pub eps: f64,
    pub dev_acc: f64,
    pub c_max: f64,
    /// Scenario length, seconds.
    pub duration: f64,
    pub timing_mode: TimingKind,
    pub timing_repeats: u32,
    /// Seconds per RK stage evaluation in cost-model timing; calibrated on
    /// this machine when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_eval: Option<f64>,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    pub dump_reports: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = DesignBounds::default();
        let par = OptimPar::default();
        Self {
            problem: "pvtol".into(),
            n_trials: 100,
            nb: 30,
            nsb: 10,
            n_scenarios: None,
            sigma_bar: 3,
            kappa_min: b.kappa.min,
            kappa_max: b.kappa.max,
            mu_d_min: b.mu_d.min,
            mu_d_max: b.mu_d.max,
            n_pred_min: b.n_pred.min,
            n_pred_max: b.n_pred.max,
            n_contr_min: b.n_contr.min,
            n_contr_max: b.n_contr.max,
            rho_f_min: b.rho_f.min,
            rho_f_max: b.rho_f.max,
            rho_constr_min: b.rho_constr.min,
            rho_constr_max: b.rho_constr.max,
            max_iter_min: b.max_iter.min,
            max_iter_max: b.max_iter.max,
            penalty_interpolation: b.penalty_interpolation,
            gamma: par.gamma,
            eps: par.eps,
            dev_acc: par.dev_acc,
            c_max: par.c_max,
            duration: crate::problem::DEFAULT_SCENARIO_DURATION,
            timing_mode: TimingKind::Wallclock,
            timing_repeats: 1,
            c_eval: None,
            seed: 0,
            jobs: 1,
            out: PathBuf::from("tuning-out"),
            dump_reports: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn design_bounds(&self) -> DesignBounds {
        DesignBounds {
            kappa: Interval::new(self.kappa_min, self.kappa_max),
            mu_d: Interval::new(self.mu_d_min, self.mu_d_max),
            n_pred: Interval::new(self.n_pred_min, self.n_pred_max),
            n_contr: Interval::new(self.n_contr_min, self.n_contr_max),
            rho_f: Interval::new(self.rho_f_min, self.rho_f_max),
            rho_constr: Interval::new(self.rho_constr_min, self.rho_constr_max),
            max_iter: Interval::new(self.max_iter_min, self.max_iter_max),
            penalty_interpolation: self.penalty_interpolation,
        }
    }

    pub fn optim_par(&self) -> OptimPar {
        OptimPar {
            gamma: self.gamma,
            eps: self.eps,
            dev_acc: self.dev_acc,
            c_max: self.c_max,
        }
    }

    /// Total scenario count `nb * nsb`.
    pub fn cardinality(&self) -> usize {
        self.nb * self.nsb
    }

    /// Checks every field; all failures are reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidInput(m) => Error::Config(m),
            other => other,
        };
        for (name, v) in [("n_trials", self.n_trials), ("nb", self.nb), ("nsb", self.nsb), ("jobs", self.jobs)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let Some(n) = self.n_scenarios {
            if n != self.cardinality() {
                return Err(Error::Config(format!(
                    "n_scenarios = {n} does not match nb x nsb = {} x {} = {}",
                    self.nb,
                    self.nsb,
                    self.cardinality()
                )));
            }
        }
        if self.sigma_bar == 0 {
            return Err(Error::Config("sigma_bar must be at least 1".into()));
        }
        if self.timing_repeats == 0 {
            return Err(Error::Config("timing_repeats must be at least 1".into()));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::Config(format!("duration must be positive, got {}", self.duration)));
        }
        if let Some(c) = self.c_eval {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("c_eval must be positive, got {c}")));
            }
        }
        self.design_bounds().validate().map_err(cfg)?;
        self.optim_par().validate().map_err(cfg)?;
        Ok(())
    }
}
