//! Plant-facing contract: dynamics, costs, soft constraints and the
//! scenario cloud used for certification.
//!
//! A user problem is a [`Plant`] implementation wrapped in a
//! [`ProblemDefinition`] that carries the dimensions, the base period `tau`
//! and the sampling hypercubes. Derivative methods on [`Plant`] default to
//! central finite differences; override them with closed forms when they are
//! available (the built-in PVTOL model does).

mod pvtol;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pvtol::{pvtol_problem, Pvtol, PvtolConfig};

/// Default wall duration of one certification scenario, seconds.
pub const DEFAULT_SCENARIO_DURATION: f64 = 0.5;

const FD_STEP: f64 = 1e-6;

/// User-supplied plant maps. Implementations must be pure: the tuner calls
/// them from many worker threads at once.
pub trait Plant: Send + Sync {
    /// Number of soft constraint rows returned by [`Plant::constraints`].
    fn n_constraints(&self) -> usize;

    /// State derivative `dx = f(x, u, p)`.
    fn rhs(&self, x: &[f64], u: &[f64], p: &[f64], dx: &mut [f64]);

    /// Nonnegative stage cost `l(x, u, p, q)`.
    fn stage_cost(&self, x: &[f64], u: &[f64], p: &[f64], q: &[f64]) -> f64;

    /// Unscaled terminal penalty shape; the controller multiplies it by `rho_f`.
    fn terminal_penalty(&self, x: &[f64], p: &[f64], q: &[f64]) -> f64;

    /// Soft constraints, satisfied when every entry is `<= 0`.
    fn constraints(&self, x: &[f64], u: &[f64], p: &[f64], q: &[f64], c: &mut [f64]);

    /// Steady input around which the cost is centred, if the plant has one.
    fn trim_input(&self) -> Option<Vec<f64>> {
        None
    }

    /// Jacobians of [`Plant::rhs`] with respect to `x` (`n_x x n_x`) and `u`
    /// (`n_x x n_u`).
    fn rhs_jacobian(&self, x: &[f64], u: &[f64], p: &[f64], jx: &mut DMatrix<f64>, ju: &mut DMatrix<f64>) {
        let n_x = x.len();
        let mut plus = vec![0.0; n_x];
        let mut minus = vec![0.0; n_x];
        let mut xs = x.to_vec();
        for j in 0..n_x {
            let h = FD_STEP * x[j].abs().max(1.0);
            xs[j] = x[j] + h;
            self.rhs(&xs, u, p, &mut plus);
            xs[j] = x[j] - h;
            self.rhs(&xs, u, p, &mut minus);
            xs[j] = x[j];
            for i in 0..n_x {
                jx[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        let mut us = u.to_vec();
        for j in 0..u.len() {
            let h = FD_STEP * u[j].abs().max(1.0);
            us[j] = u[j] + h;
            self.rhs(x, &us, p, &mut plus);
            us[j] = u[j] - h;
            self.rhs(x, &us, p, &mut minus);
            us[j] = u[j];
            for i in 0..n_x {
                ju[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
    }

    /// Gradient of [`Plant::stage_cost`] with respect to `x` and `u`.
    fn stage_cost_gradient(
        &self,
        x: &[f64],
        u: &[f64],
        p: &[f64],
        q: &[f64],
        gx: &mut [f64],
        gu: &mut [f64],
    ) {
        let mut xs = x.to_vec();
        for j in 0..x.len() {
            let h = FD_STEP * x[j].abs().max(1.0);
            xs[j] = x[j] + h;
            let fp = self.stage_cost(&xs, u, p, q);
            xs[j] = x[j] - h;
            let fm = self.stage_cost(&xs, u, p, q);
            xs[j] = x[j];
            gx[j] = (fp - fm) / (2.0 * h);
        }
        let mut us = u.to_vec();
        for j in 0..u.len() {
            let h = FD_STEP * u[j].abs().max(1.0);
            us[j] = u[j] + h;
            let fp = self.stage_cost(x, &us, p, q);
            us[j] = u[j] - h;
            let fm = self.stage_cost(x, &us, p, q);
            us[j] = u[j];
            gu[j] = (fp - fm) / (2.0 * h);
        }
    }

    /// Gradient of [`Plant::terminal_penalty`] with respect to `x`.
    fn terminal_penalty_gradient(&self, x: &[f64], p: &[f64], q: &[f64], gx: &mut [f64]) {
        let mut xs = x.to_vec();
        for j in 0..x.len() {
            let h = FD_STEP * x[j].abs().max(1.0);
            xs[j] = x[j] + h;
            let fp = self.terminal_penalty(&xs, p, q);
            xs[j] = x[j] - h;
            let fm = self.terminal_penalty(&xs, p, q);
            xs[j] = x[j];
            gx[j] = (fp - fm) / (2.0 * h);
        }
    }

    /// Jacobians of [`Plant::constraints`] with respect to `x` (`n_c x n_x`)
    /// and `u` (`n_c x n_u`).
    fn constraints_jacobian(
        &self,
        x: &[f64],
        u: &[f64],
        p: &[f64],
        q: &[f64],
        cx: &mut DMatrix<f64>,
        cu: &mut DMatrix<f64>,
    ) {
        let n_c = self.n_constraints();
        let mut plus = vec![0.0; n_c];
        let mut minus = vec![0.0; n_c];
        let mut xs = x.to_vec();
        for j in 0..x.len() {
            let h = FD_STEP * x[j].abs().max(1.0);
            xs[j] = x[j] + h;
            self.constraints(&xs, u, p, q, &mut plus);
            xs[j] = x[j] - h;
            self.constraints(&xs, u, p, q, &mut minus);
            xs[j] = x[j];
            for i in 0..n_c {
                cx[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        let mut us = u.to_vec();
        for j in 0..u.len() {
            let h = FD_STEP * u[j].abs().max(1.0);
            us[j] = u[j] + h;
            self.constraints(x, &us, p, q, &mut plus);
            us[j] = u[j] - h;
            self.constraints(x, &us, p, q, &mut minus);
            us[j] = u[j];
            for i in 0..n_c {
                cu[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
    }
}

/// Box bounds and nominal values that, together with a [`Plant`], make up a
/// problem definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemBounds {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub p_nom: Vec<f64>,
    pub p_std: Vec<f64>,
}

/// A validated plant together with its dimensions, base period and sampling
/// hypercubes.
#[derive(Clone)]
pub struct ProblemDefinition {
    name: String,
    tau: f64,
    bounds: ProblemBounds,
    scenario_duration: f64,
    plant: Arc<dyn Plant>,
}

impl std::fmt::Debug for ProblemDefinition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemDefinition")
            .field("name", &self.name)
            .field("tau", &self.tau)
            .field("bounds", &self.bounds)
            .field("scenario_duration", &self.scenario_duration)
            .finish_non_exhaustive()
    }
}

fn check_interval(name: &str, lo: &[f64], hi: &[f64]) -> Result<()> {
    if lo.len() != hi.len() {
        return Err(Error::invalid(format!(
            "{name}: lower bound has {} entries, upper bound {}",
            lo.len(),
            hi.len()
        )));
    }
    for (i, (l, h)) in lo.iter().zip(hi).enumerate() {
        if !l.is_finite() || !h.is_finite() || l > h {
            return Err(Error::invalid(format!("{name}[{i}]: bad interval [{l}, {h}]")));
        }
    }
    Ok(())
}

impl ProblemDefinition {
    pub fn new(name: impl Into<String>, tau: f64, bounds: ProblemBounds, plant: Arc<dyn Plant>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        check_interval("u", &bounds.u_min, &bounds.u_max)?;
        check_interval("x", &bounds.x_min, &bounds.x_max)?;
        check_interval("q", &bounds.q_min, &bounds.q_max)?;
        if bounds.p_nom.len() != bounds.p_std.len() {
            return Err(Error::invalid("p_nom and p_std lengths differ"));
        }
        if bounds.p_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("p_std entries must be finite and nonnegative"));
        }
        for (what, len) in [
            ("n_x", bounds.x_min.len()),
            ("n_u", bounds.u_min.len()),
            ("n_p", bounds.p_nom.len()),
            ("n_q", bounds.q_min.len()),
        ] {
            if len == 0 {
                return Err(Error::invalid(format!("{what} must be at least 1")));
            }
        }
        Ok(Self {
            name: name.into(),
            tau,
            bounds,
            scenario_duration: DEFAULT_SCENARIO_DURATION,
            plant,
        })
    }

    /// Overrides the duration assigned to scenarios by [`generate_cloud`].
    pub fn with_scenario_duration(mut self, duration: f64) -> Result<Self> {
        if !(duration.is_finite() && duration >= self.tau) {
            return Err(Error::invalid(format!(
                "scenario duration {duration} must be finite and >= tau = {}",
                self.tau
            )));
        }
        self.scenario_duration = duration;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn bounds(&self) -> &ProblemBounds {
        &self.bounds
    }
    pub fn plant(&self) -> &dyn Plant {
        self.plant.as_ref()
    }
    pub fn scenario_duration(&self) -> f64 {
        self.scenario_duration
    }
    pub fn n_x(&self) -> usize {
        self.bounds.x_min.len()
    }
    pub fn n_u(&self) -> usize {
        self.bounds.u_min.len()
    }
    pub fn n_p(&self) -> usize {
        self.bounds.p_nom.len()
    }
    pub fn n_q(&self) -> usize {
        self.bounds.q_min.len()
    }
    pub fn n_c(&self) -> usize {
        self.plant.n_constraints()
    }

    /// Clamps `u` into the input box, in place.
    pub fn clamp_input(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.bounds.u_min).zip(&self.bounds.u_max) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Trim input if the plant declares one, otherwise the centre of the
    /// input box.
    pub fn default_input(&self) -> Vec<f64> {
        let mut u = self.plant.trim_input().unwrap_or_else(|| {
            self.bounds
                .u_min
                .iter()
                .zip(&self.bounds.u_max)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect()
        });
        self.clamp_input(&mut u);
        u
    }
}

/// One certification experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Closed-loop simulation length, seconds.
    pub duration: f64,
}

impl Scenario {
    /// Checks the scenario against the problem's hypercubes.
    pub fn validate(&self, problem: &ProblemDefinition) -> Result<()> {
        let b = problem.bounds();
        if self.x0.len() != problem.n_x() || self.p.len() != problem.n_p() || self.q.len() != problem.n_q() {
            return Err(Error::invalid("scenario dimensions do not match the problem"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0 && self.duration >= problem.tau()) {
            return Err(Error::invalid(format!("scenario duration {} is below tau", self.duration)));
        }
        let inside = |v: &[f64], lo: &[f64], hi: &[f64]| v.iter().zip(lo).zip(hi).all(|((v, l), h)| l <= v && v <= h);
        if !inside(&self.x0, &b.x_min, &b.x_max) {
            return Err(Error::invalid("x0 outside [x_min, x_max]"));
        }
        if !inside(&self.q, &b.q_min, &b.q_max) {
            return Err(Error::invalid("q outside [q_min, q_max]"));
        }
        Ok(())
    }
}

/// Scenario set partitioned into equally sized batches; batch 1 is the
/// initial set used to freeze each candidate's alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBatchSet {
    batches: Vec<Vec<Scenario>>,
}

impl ScenarioBatchSet {
    pub fn batches(&self) -> &[Vec<Scenario>] {
        &self.batches
    }

    /// The initial set `A_0`.
    pub fn initial(&self) -> &[Scenario] {
        &self.batches[0]
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn cardinality(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn all(&self) -> impl Iterator<Item = &Scenario> {
        self.batches.iter().flatten()
    }
}

/// Draws `n` scenarios: `x0` and `q` uniform on their boxes, `p` Gaussian
/// around `p_nom` clipped to three standard deviations. Each scenario uses
/// its own RNG stream, so the output is deterministic in `seed` alone.
pub fn generate_cloud(problem: &ProblemDefinition, n: usize, seed: u64) -> Vec<Scenario> {
    let b = problem.bounds();
    let uniform = |rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]| -> Vec<f64> {
        lo.iter()
            .zip(hi)
            .map(|(l, h)| {
                let r: f64 = rng.random();
                // keeps x0 inside the box even when l + r (h - l) rounds up
                (l + r * (h - l)).clamp(*l, *h)
            })
            .collect()
    };
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x0 = uniform(&mut rng, &b.x_min, &b.x_max);
            let q = uniform(&mut rng, &b.q_min, &b.q_max);
            let p = b
                .p_nom
                .iter()
                .zip(&b.p_std)
                .map(|(nom, std)| {
                    let g: f64 = rng.sample(StandardNormal);
                    (nom + std * g).clamp(nom - 3.0 * std, nom + 3.0 * std)
                })
                .collect();
            Scenario {
                x0,
                p,
                q,
                duration: problem.scenario_duration(),
            }
        })
        .collect()
}

/// Splits `scenarios` into `nb` consecutive batches of `nsb` scenarios.
pub fn make_batches(scenarios: Vec<Scenario>, nb: usize, nsb: usize) -> Result<ScenarioBatchSet> {
    if nb == 0 || nsb == 0 {
        return Err(Error::invalid("nb and nsb must be at least 1"));
    }
    if scenarios.len() != nb * nsb {
        return Err(Error::invalid(format!(
            "{} scenarios cannot be split into {nb} batches of {nsb}",
            scenarios.len()
        )));
    }
    let mut it = scenarios.into_iter();
    let batches = (0..nb).map(|_| it.by_ref().take(nsb).collect()).collect();
    Ok(ScenarioBatchSet { batches })
}

type ProblemFactory = Box<dyn Fn() -> Result<ProblemDefinition> + Send + Sync>;

/// Name-to-problem lookup used by the CLI. Custom problems are added with
/// [`ProblemRegistry::register`].
pub struct ProblemRegistry {
    factories: BTreeMap<String, ProblemFactory>,
}

impl Default for ProblemRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ProblemRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("pvtol", || Ok(pvtol_problem()));
        reg
    }

    pub fn register<F>(&mut self, name: impl Into<String>, factory: F)
    where
        F: Fn() -> Result<ProblemDefinition> + Send + Sync + 'static,
    {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn get(&self, name: &str) -> Result<ProblemDefinition> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownProblem(name.to_string()))?;
        factory()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}
