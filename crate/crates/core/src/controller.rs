//! Single-shooting NMPC with an iteration-capped, box-projected gradient
//! solver and warm-started closed-loop simulation.
//!
//! The decision vector `z` stacks `n_contr` input blocks of size `n_u`; the
//! last block is held until the end of the `N_pred`-step horizon. The
//! open-loop cost is
//!
//! ```text
//! sum_{j<N} l(x_j, u_j) tau_u + rho_f Psi(x_N) + rho_constr sum_{1<=j<=N} sum_i max(0, c_i(x_j, u_j)) tau_u
//! ```
//!
//! with `x_{j+1}` predicted on the setting's [`PredictionGrid`]. At `j = N`
//! the constraint row reuses the last applied block.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignVector;
use crate::error::{Error, Result};
use crate::integrator::{predict_step, rk4_step_sensitivity, simulate_fine_trajectory, IntegrationError, PredictionGrid, SensitivityWork};
use crate::problem::{ProblemDefinition, Scenario};

/// How solver time is obtained for the real-time criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TimingMode {
    /// Measured wall-clock time; the median of `repeats` runs of each solve.
    Wallclock { repeats: u32 },
    /// `solver_time = c_eval * work_units`; deterministic.
    CostModel { c_eval: f64 },
}

/// Tolerances of the projected-gradient solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when the projected gradient's infinity norm drops below this.
    pub g_tol: f64,
    /// Backtracking contraction factor.
    pub shrink: f64,
    /// Armijo sufficient-decrease slope.
    pub armijo: f64,
    pub max_backtracks: u32,
    /// Largest per-component move of the first trial step of a solve.
    pub initial_move: f64,
    pub step_rule: StepRule,
}

/// How the first trial step of an iteration is derived from the previous
/// accepted one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Twice the previous accepted step.
    Doubling,
    /// `s's / s'y` from the last accepted move `s` and gradient change `y`;
    /// falls back to doubling when the curvature estimate is not positive.
    #[default]
    BarzilaiBorwein,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            g_tol: 1e-8,
            shrink: 0.5,
            armijo: 1e-4,
            max_backtracks: 40,
            initial_move: 1.0,
            step_rule: StepRule::default(),
        }
    }
}

/// A concrete NMPC controller: a problem plus a realized design vector.
#[derive(Debug, Clone)]
pub struct MpcSetting {
    problem: ProblemDefinition,
    design: DesignVector,
    grid: PredictionGrid,
    options: SolverOptions,
}

/// Output of one open-loop solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopResult {
    pub z_opt: Vec<f64>,
    /// Best penalized open-loop cost found.
    pub cost: f64,
    pub iterations: u32,
    /// Seconds, measured or modeled per [`TimingMode`].
    pub solver_time: f64,
    /// RK stage evaluations spent: `4 n_steps N_pred` per cost pass and
    /// `(1 + n_z)` times that per cost-and-gradient pass.
    pub work_units: u64,
    pub cost_evals: u32,
    pub gradient_evals: u32,
    /// Costs of the accepted iterates, starting with the warm start.
    pub accepted_costs: Vec<f64>,
    pub diverged: bool,
}

/// Per-update record of a closed-loop experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    /// Number of controller updates.
    pub m: usize,
    pub tau_u: f64,
    pub solver_time: Vec<f64>,
    pub j_ol: Vec<f64>,
    /// Largest constraint value on the fine grid of each updating interval.
    pub max_violation: Vec<f64>,
    /// `sum_k l(x_k, u_k) tau_u` over the applied trajectory.
    pub closed_loop_cost: f64,
    /// Plant states on the `tau` grid.
    pub states: Vec<Vec<f64>>,
    /// Applied inputs, one per update.
    pub inputs: Vec<Vec<f64>>,
    pub diverged: bool,
    /// Update index (0-based) at which the experiment diverged.
    pub diverged_at: Option<usize>,
    pub solves: usize,
}

impl MpcSetting {
    pub fn new(problem: &ProblemDefinition, design: DesignVector) -> Result<Self> {
        Self::with_options(problem, design, SolverOptions::default())
    }

    pub fn with_options(problem: &ProblemDefinition, design: DesignVector, options: SolverOptions) -> Result<Self> {
        if design.kappa == 0 || design.n_pred == 0 || design.n_contr == 0 || design.max_iter == 0 {
            return Err(Error::invalid("design integers must be at least 1"));
        }
        if design.n_contr > design.n_pred {
            return Err(Error::invalid("n_contr exceeds N_pred"));
        }
        if !(design.rho_f >= 0.0 && design.rho_constr >= 0.0) {
            return Err(Error::invalid("penalty weights must be nonnegative"));
        }
        let grid = PredictionGrid::new(problem.tau(), design.kappa, design.mu_d)?;
        Ok(Self {
            problem: problem.clone(),
            design,
            grid,
            options,
        })
    }

    pub fn problem(&self) -> &ProblemDefinition {
        &self.problem
    }
    pub fn design(&self) -> &DesignVector {
        &self.design
    }
    pub fn grid(&self) -> &PredictionGrid {
        &self.grid
    }
    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    /// Decision dimension `n_contr * n_u`.
    pub fn n_z(&self) -> usize {
        self.design.n_contr as usize * self.problem.n_u()
    }

    /// Number of updates needed to cover `duration` seconds.
    pub fn updates_for(&self, duration: f64) -> usize {
        ((duration / self.grid.tau_u) - 1e-9).ceil().max(1.0) as usize
    }

    /// RK stage evaluations of one cost pass.
    pub fn stages_per_pass(&self) -> u64 {
        4 * u64::from(self.grid.n_steps) * u64::from(self.design.n_pred)
    }

    /// The default warm start: the trim (or box-centre) input in every block.
    pub fn default_warm_start(&self) -> Vec<f64> {
        let u = self.problem.default_input();
        u.iter().copied().cycle().take(self.n_z()).collect()
    }

    fn block_col(&self, j: usize) -> usize {
        j.min(self.design.n_contr as usize - 1) * self.problem.n_u()
    }

    fn project(&self, z: &mut [f64]) {
        for chunk in z.chunks_mut(self.problem.n_u()) {
            self.problem.clamp_input(chunk);
        }
    }
}

fn positive_part_sum(c: &[f64]) -> f64 {
    c.iter().map(|v| v.max(0.0)).sum()
}

/// Penalized open-loop cost of decision vector `z` from state `x`.
pub fn open_loop_cost(setting: &MpcSetting, x: &[f64], p: &[f64], q: &[f64], z: &[f64]) -> Result<f64, IntegrationError> {
    let pb = &setting.problem;
    let plant = pb.plant();
    let n_u = pb.n_u();
    let n = setting.design.n_pred as usize;
    let tau_u = setting.grid.tau_u;
    let mut c = vec![0.0; pb.n_c()];
    let mut state = x.to_vec();
    let mut stage = 0.0;
    let mut penalty = 0.0;
    for j in 0..n {
        let col = setting.block_col(j);
        let u = &z[col..col + n_u];
        if j > 0 {
            plant.constraints(&state, u, p, q, &mut c);
            penalty += positive_part_sum(&c);
        }
        stage += plant.stage_cost(&state, u, p, q);
        state = predict_step(pb, &state, u, p, &setting.grid).map_err(|e| IntegrationError { step: j * setting.grid.n_steps as usize + e.step })?;
    }
    let col = setting.block_col(n - 1);
    plant.constraints(&state, &z[col..col + n_u], p, q, &mut c);
    penalty += positive_part_sum(&c);
    let terminal = plant.terminal_penalty(&state, p, q);
    let total = stage * tau_u + setting.design.rho_constr * penalty * tau_u + setting.design.rho_f * terminal;
    if total.is_finite() {
        Ok(total)
    } else {
        Err(IntegrationError { step: n * setting.grid.n_steps as usize })
    }
}

/// Predicted states `x_0..=x_N` under decision vector `z`.
pub fn predict_trajectory(setting: &MpcSetting, x: &[f64], p: &[f64], z: &[f64]) -> Result<Vec<Vec<f64>>, IntegrationError> {
    let n_u = setting.problem.n_u();
    let n = setting.design.n_pred as usize;
    let mut out = Vec::with_capacity(n + 1);
    out.push(x.to_vec());
    for j in 0..n {
        let col = setting.block_col(j);
        let next = predict_step(&setting.problem, &out[j], &z[col..col + n_u], p, &setting.grid)?;
        out.push(next);
    }
    Ok(out)
}

/// Input block applied at prediction step `j` (`j = N` reuses the last one).
pub fn input_block<'a>(setting: &MpcSetting, z: &'a [f64], j: usize) -> &'a [f64] {
    let col = setting.block_col(j.min(setting.design.n_pred as usize - 1));
    &z[col..col + setting.problem.n_u()]
}

/// Cost and its exact gradient, obtained by propagating forward
/// sensitivities through every RK4 stage. `max(0, .)` contributes a zero
/// subgradient at its kink.
pub fn open_loop_cost_gradient(
    setting: &MpcSetting,
    x: &[f64],
    p: &[f64],
    q: &[f64],
    z: &[f64],
) -> Result<(f64, Vec<f64>), IntegrationError> {
    let pb = &setting.problem;
    let plant = pb.plant();
    let (n_x, n_u, n_c) = (pb.n_x(), pb.n_u(), pb.n_c());
    let n_z = setting.n_z();
    let n = setting.design.n_pred as usize;
    let tau_u = setting.grid.tau_u;
    let h = setting.grid.tau_p();
    let rho_c = setting.design.rho_constr;

    let mut work = SensitivityWork::new(n_x, n_u, n_z);
    let mut sens = DMatrix::<f64>::zeros(n_x, n_z);
    let mut state = x.to_vec();
    let mut grad = DVector::<f64>::zeros(n_z);
    let mut gx = DVector::<f64>::zeros(n_x);
    let mut gu = vec![0.0; n_u];
    let mut c = vec![0.0; n_c];
    let mut cx = DMatrix::<f64>::zeros(n_c, n_x);
    let mut cu = DMatrix::<f64>::zeros(n_c, n_u);
    let mut cost = 0.0;

    let mut add_penalty = |state: &[f64], sens: &DMatrix<f64>, col: usize, grad: &mut DVector<f64>, cost: &mut f64| {
        let u = &z[col..col + n_u];
        plant.constraints(state, u, p, q, &mut c);
        if c.iter().all(|v| *v <= 0.0) {
            return;
        }
        plant.constraints_jacobian(state, u, p, q, &mut cx, &mut cu);
        let w = rho_c * tau_u;
        for i in 0..n_c {
            if c[i] > 0.0 {
                *cost += w * c[i];
                let row = cx.row(i).transpose();
                grad.gemv_tr(w, sens, &row, 1.0);
                for k in 0..n_u {
                    grad[col + k] += w * cu[(i, k)];
                }
            }
        }
    };

    for j in 0..n {
        let col = setting.block_col(j);
        let u = &z[col..col + n_u];
        if j > 0 {
            add_penalty(&state, &sens, col, &mut grad, &mut cost);
        }
        cost += tau_u * plant.stage_cost(&state, u, p, q);
        plant.stage_cost_gradient(&state, u, p, q, gx.as_mut_slice(), &mut gu);
        grad.gemv_tr(tau_u, &sens, &gx, 1.0);
        for k in 0..n_u {
            grad[col + k] += tau_u * gu[k];
        }
        for s in 0..setting.grid.n_steps as usize {
            let step = j * setting.grid.n_steps as usize + s;
            rk4_step_sensitivity(plant, &mut state, &mut sens, u, col, p, h, &mut work, step)?;
        }
    }
    add_penalty(&state, &sens, setting.block_col(n - 1), &mut grad, &mut cost);
    let rho_f = setting.design.rho_f;
    cost += rho_f * plant.terminal_penalty(&state, p, q);
    plant.terminal_penalty_gradient(&state, p, q, gx.as_mut_slice());
    grad.gemv_tr(rho_f, &sens, &gx, 1.0);

    if cost.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok((cost, grad.as_slice().to_vec()))
    } else {
        Err(IntegrationError { step: n * setting.grid.n_steps as usize })
    }
}

struct Counters {
    cost_evals: u32,
    gradient_evals: u32,
}

fn solve_once(setting: &MpcSetting, x: &[f64], p: &[f64], q: &[f64], z0: &[f64]) -> OpenLoopResult {
    let opts = setting.options;
    let n_z = setting.n_z();
    let mut z = z0.to_vec();
    z.resize(n_z, 0.0);
    setting.project(&mut z);
    let mut counters = Counters {
        cost_evals: 0,
        gradient_evals: 0,
    };
    let finish = |z: Vec<f64>, cost: f64, iterations: u32, accepted: Vec<f64>, c: Counters, diverged: bool| {
        let pass = setting.stages_per_pass();
        OpenLoopResult {
            z_opt: z,
            cost,
            iterations,
            solver_time: 0.0,
            work_units: pass * u64::from(c.cost_evals) + pass * (1 + n_z as u64) * u64::from(c.gradient_evals),
            cost_evals: c.cost_evals,
            gradient_evals: c.gradient_evals,
            accepted_costs: accepted,
            diverged,
        }
    };

    counters.gradient_evals += 1;
    let (mut cost, mut grad) = match open_loop_cost_gradient(setting, x, p, q, &z) {
        Ok(v) => v,
        Err(_) => return finish(z, f64::INFINITY, 0, Vec::new(), counters, true),
    };
    let mut accepted = vec![cost];
    let g_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut step = if g_inf > 0.0 { opts.initial_move / g_inf } else { 0.0 };
    let mut iterations = 0;
    let mut trial = vec![0.0; n_z];

    while iterations < setting.design.max_iter {
        // projected-gradient stationarity
        let pg = z
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(i, (zi, gi))| {
                let mut t = [zi - gi];
                let col = i % setting.problem.n_u();
                let b = setting.problem.bounds();
                t[0] = t[0].clamp(b.u_min[col], b.u_max[col]);
                (zi - t[0]).abs()
            })
            .fold(0.0f64, f64::max);
        if pg <= opts.g_tol {
            break;
        }
        iterations += 1;
        let mut accepted_step = None;
        for _ in 0..=opts.max_backtracks {
            for i in 0..n_z {
                trial[i] = z[i] - step * grad[i];
            }
            setting.project(&mut trial);
            let slope: f64 = trial.iter().zip(&z).zip(&grad).map(|((t, zi), g)| g * (t - zi)).sum();
            if slope >= 0.0 {
                break;
            }
            counters.cost_evals += 1;
            if let Ok(trial_cost) = open_loop_cost(setting, x, p, q, &trial) {
                if trial_cost <= cost + opts.armijo * slope {
                    accepted_step = Some(trial_cost);
                    break;
                }
            }
            step *= opts.shrink;
        }
        let Some(new_cost) = accepted_step else { break };
        std::mem::swap(&mut z, &mut trial);
        cost = new_cost;
        accepted.push(cost);
        step /= opts.shrink;
        if iterations < setting.design.max_iter {
            counters.gradient_evals += 1;
            match open_loop_cost_gradient(setting, x, p, q, &z) {
                Ok((_, g)) => {
                    if opts.step_rule == StepRule::BarzilaiBorwein {
                        // trial still holds the previous iterate
                        let (mut ss, mut sy) = (0.0, 0.0);
                        for i in 0..n_z {
                            let (si, yi) = (z[i] - trial[i], g[i] - grad[i]);
                            ss += si * si;
                            sy += si * yi;
                        }
                        if sy > 0.0 && ss > 0.0 {
                            step = ss / sy;
                        }
                    }
                    grad = g;
                }
                Err(_) => break,
            }
        }
    }
    finish(z, cost, iterations, accepted, counters, false)
}

/// Solves the open-loop problem from warm start `z0` (projected onto the
/// box first). Returns the best iterate; its cost never exceeds the warm
/// start's.
pub fn solve(setting: &MpcSetting, x: &[f64], p: &[f64], q: &[f64], z0: &[f64], timing: TimingMode) -> OpenLoopResult {
    match timing {
        TimingMode::CostModel { c_eval } => {
            let mut res = solve_once(setting, x, p, q, z0);
            res.solver_time = c_eval * res.work_units as f64;
            res
        }
        TimingMode::Wallclock { repeats } => {
            let mut times = Vec::with_capacity(repeats.max(1) as usize);
            let mut res = None;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                let r = solve_once(setting, x, p, q, z0);
                times.push(start.elapsed().as_secs_f64());
                res = Some(r);
            }
            times.sort_by(f64::total_cmp);
            let mut res = res.expect("at least one repeat");
            res.solver_time = times[times.len() / 2];
            res
        }
    }
}

/// Feedback law: the first block of the optimized decision vector.
pub fn feedback(
    setting: &MpcSetting,
    x: &[f64],
    p: &[f64],
    q: &[f64],
    z0: &[f64],
    timing: TimingMode,
) -> (Vec<f64>, OpenLoopResult) {
    let res = solve(setting, x, p, q, z0, timing);
    let u = res.z_opt[..setting.problem.n_u()].to_vec();
    (u, res)
}

/// Shifts a decision vector by one block, duplicating the last block.
pub fn shift_warm_start(z: &[f64], n_u: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    out.extend_from_slice(&z[n_u.min(z.len())..]);
    out.extend_from_slice(&z[z.len() - n_u..]);
    out
}

/// Closed-loop experiment: `m = ceil(duration / tau_u)` warm-started
/// updates, each applied to the plant over `kappa` RK4 steps of `tau`.
pub fn sim_cl(setting: &MpcSetting, scenario: &Scenario, z0: &[f64], timing: TimingMode) -> ClosedLoopReport {
    let pb = &setting.problem;
    let plant = pb.plant();
    let n_u = pb.n_u();
    let m = setting.updates_for(scenario.duration);
    let (p, q) = (&scenario.p, &scenario.q);
    let mut report = ClosedLoopReport {
        m,
        tau_u: setting.grid.tau_u,
        solver_time: Vec::with_capacity(m),
        j_ol: Vec::with_capacity(m),
        max_violation: Vec::with_capacity(m),
        closed_loop_cost: 0.0,
        states: vec![scenario.x0.clone()],
        inputs: Vec::with_capacity(m),
        diverged: false,
        diverged_at: None,
        solves: 0,
    };
    let mut x = scenario.x0.clone();
    let mut z = z0.to_vec();
    let mut c = vec![0.0; pb.n_c()];
    for k in 0..m {
        let (u, res) = feedback(setting, &x, p, q, &z, timing);
        report.solves += 1;
        report.solver_time.push(res.solver_time);
        report.j_ol.push(res.cost);
        let traj = if res.diverged {
            None
        } else {
            simulate_fine_trajectory(pb, &x, &u, p, setting.design.kappa).ok()
        };
        let Some(traj) = traj else {
            report.diverged = true;
            report.diverged_at = Some(k);
            report.max_violation.push(f64::INFINITY);
            report.solver_time.resize(m, f64::INFINITY);
            report.j_ol.resize(m, f64::INFINITY);
            report.max_violation.resize(m, f64::INFINITY);
            report.closed_loop_cost = f64::INFINITY;
            return report;
        };
        let worst = traj
            .iter()
            .map(|s| {
                plant.constraints(s, &u, p, q, &mut c);
                c.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        report.max_violation.push(worst);
        report.closed_loop_cost += plant.stage_cost(&x, &u, p, q) * setting.grid.tau_u;
        x = traj.last().expect("trajectory holds kappa + 1 states").clone();
        report.states.extend(traj.into_iter().skip(1));
        report.inputs.push(u);
        z = shift_warm_start(&res.z_opt, n_u);
    }
    report
}

/// Seconds per RK stage evaluation, measured by timing 10^4 evaluations of
/// the plant's right-hand side at the centre of its sampling boxes.
pub fn calibrate_c_eval(problem: &ProblemDefinition) -> f64 {
    const N: u32 = 10_000;
    let b = problem.bounds();
    let mid = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect::<Vec<_>>();
    let x = mid(&b.x_min, &b.x_max);
    let u = problem.default_input();
    let mut dx = vec![0.0; x.len()];
    let start = Instant::now();
    let mut acc = 0.0;
    for i in 0..N {
        let mut xi = x.clone();
        xi[0] += f64::from(i) * 1e-12;
        problem.plant().rhs(&xi, &u, &b.p_nom, &mut dx);
        acc += dx[0];
    }
    std::hint::black_box(acc);
    (start.elapsed().as_secs_f64() / f64::from(N)).max(1e-12)
}
