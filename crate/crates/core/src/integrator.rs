//! Fixed-step classical RK4 at two fidelities: the plant truth model steps at
//! the base period `tau`, predictions step at `tau_u / n_steps`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Plant, ProblemDefinition};

/// A non-finite state or derivative appeared at the given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("non-finite state during integration step {step}")]
pub struct IntegrationError {
    pub step: usize,
}

/// Number of inner RK steps used to predict one updating period:
/// `ceil(1 + mu_d (kappa - 1))`.
pub fn n_steps_for(mu_d: f64, kappa: u32) -> Result<u32> {
    if !(0.0..=1.0).contains(&mu_d) {
        return Err(Error::invalid(format!("mu_d must lie in [0, 1], got {mu_d}")));
    }
    if kappa == 0 {
        return Err(Error::invalid("kappa must be at least 1"));
    }
    // absorb rounding noise in mu_d (kappa - 1) before taking the ceiling
    let raw = (1.0 + mu_d * f64::from(kappa - 1) - 1e-9).ceil();
    Ok((raw as u32).clamp(1, kappa))
}

/// Prediction time grid of one updating period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    /// Updating period `kappa * tau`, seconds.
    pub tau_u: f64,
    pub n_steps: u32,
}

impl PredictionGrid {
    pub fn new(tau: f64, kappa: u32, mu_d: f64) -> Result<Self> {
        let n_steps = n_steps_for(mu_d, kappa)?;
        Ok(Self {
            tau_u: f64::from(kappa) * tau,
            n_steps,
        })
    }

    /// Inner prediction step, seconds.
    pub fn tau_p(&self) -> f64 {
        self.tau_u / f64::from(self.n_steps)
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn rk4_into(plant: &dyn Plant, x: &[f64], u: &[f64], p: &[f64], h: f64, out: &mut [f64], step: usize) -> Result<(), IntegrationError> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut xs = vec![0.0; n];
    plant.rhs(x, u, p, &mut k1);
    for i in 0..n {
        xs[i] = x[i] + 0.5 * h * k1[i];
    }
    plant.rhs(&xs, u, p, &mut k2);
    for i in 0..n {
        xs[i] = x[i] + 0.5 * h * k2[i];
    }
    plant.rhs(&xs, u, p, &mut k3);
    for i in 0..n {
        xs[i] = x[i] + h * k3[i];
    }
    plant.rhs(&xs, u, p, &mut k4);
    for i in 0..n {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if all_finite(out) {
        Ok(())
    } else {
        Err(IntegrationError { step })
    }
}

/// One classical RK4 step of `x' = f(x, u, p)` with `u` held over `h`.
pub fn rk4_step(problem: &ProblemDefinition, x: &[f64], u: &[f64], p: &[f64], h: f64) -> Result<Vec<f64>, IntegrationError> {
    let mut out = vec![0.0; x.len()];
    rk4_into(problem.plant(), x, u, p, h, &mut out, 0)?;
    Ok(out)
}

fn chain(problem: &ProblemDefinition, x: &[f64], u: &[f64], p: &[f64], h: f64, steps: u32) -> Result<Vec<f64>, IntegrationError> {
    let mut cur = x.to_vec();
    let mut next = vec![0.0; x.len()];
    for s in 0..steps as usize {
        rk4_into(problem.plant(), &cur, u, p, h, &mut next, s)?;
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Predicts one updating period with `grid.n_steps` RK4 steps of `tau_p`.
pub fn predict_step(
    problem: &ProblemDefinition,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    grid: &PredictionGrid,
) -> Result<Vec<f64>, IntegrationError> {
    chain(problem, x, u, p, grid.tau_p(), grid.n_steps)
}

/// Plant truth model over one updating period: `kappa` RK4 steps of `tau`.
pub fn simulate_fine(problem: &ProblemDefinition, x: &[f64], u: &[f64], p: &[f64], kappa: u32) -> Result<Vec<f64>, IntegrationError> {
    chain(problem, x, u, p, problem.tau(), kappa)
}

/// Like [`simulate_fine`] but returns every intermediate state, starting with
/// `x` itself (`kappa + 1` entries).
pub fn simulate_fine_trajectory(
    problem: &ProblemDefinition,
    x: &[f64],
    u: &[f64],
    p: &[f64],
    kappa: u32,
) -> Result<Vec<Vec<f64>>, IntegrationError> {
    let mut traj = Vec::with_capacity(kappa as usize + 1);
    traj.push(x.to_vec());
    for s in 0..kappa as usize {
        let mut next = vec![0.0; x.len()];
        rk4_into(problem.plant(), &traj[s], u, p, problem.tau(), &mut next, s)?;
        traj.push(next);
    }
    Ok(traj)
}

fn add_scaled(y: &mut DMatrix<f64>, a: f64, x: &DMatrix<f64>) {
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Scratch buffers for [`rk4_step_sensitivity`].
pub(crate) struct SensitivityWork {
    jx: DMatrix<f64>,
    ju: DMatrix<f64>,
    k: [Vec<f64>; 4],
    dk: [DMatrix<f64>; 4],
    stage: DMatrix<f64>,
    xs: Vec<f64>,
}

impl SensitivityWork {
    pub(crate) fn new(n_x: usize, n_u: usize, n_z: usize) -> Self {
        Self {
            jx: DMatrix::zeros(n_x, n_x),
            ju: DMatrix::zeros(n_x, n_u),
            k: std::array::from_fn(|_| vec![0.0; n_x]),
            dk: std::array::from_fn(|_| DMatrix::zeros(n_x, n_z)),
            stage: DMatrix::zeros(n_x, n_z),
            xs: vec![0.0; n_x],
        }
    }
}

/// One RK4 step together with the forward sensitivity of the end state to
/// the decision vector.
///
/// `sens` holds `dx/dz` on entry and `dx_next/dz` on exit. The held input is
/// the decision block starting at column `u_col`, so `du/dz` is the identity
/// on those `n_u` columns and zero elsewhere.
pub(crate) fn rk4_step_sensitivity(
    plant: &dyn Plant,
    x: &mut [f64],
    sens: &mut DMatrix<f64>,
    u: &[f64],
    u_col: usize,
    p: &[f64],
    h: f64,
    work: &mut SensitivityWork,
    step: usize,
) -> Result<(), IntegrationError> {
    let n_x = x.len();
    let n_u = u.len();
    const C: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        // stage state and its sensitivity
        if s == 0 {
            work.xs.copy_from_slice(x);
            work.stage.copy_from(sens);
        } else {
            let (prev_k, prev_dk) = (&work.k[s - 1], &work.dk[s - 1]);
            for i in 0..n_x {
                work.xs[i] = x[i] + C[s] * h * prev_k[i];
            }
            work.stage.copy_from(sens);
            add_scaled(&mut work.stage, C[s] * h, prev_dk);
        }
        plant.rhs(&work.xs, u, p, &mut work.k[s]);
        plant.rhs_jacobian(&work.xs, u, p, &mut work.jx, &mut work.ju);
        work.jx.mul_to(&work.stage, &mut work.dk[s]);
        for j in 0..n_u {
            for i in 0..n_x {
                work.dk[s][(i, u_col + j)] += work.ju[(i, j)];
            }
        }
    }
    for i in 0..n_x {
        x[i] += h / 6.0 * (work.k[0][i] + 2.0 * work.k[1][i] + 2.0 * work.k[2][i] + work.k[3][i]);
    }
    add_scaled(sens, h / 6.0, &work.dk[0]);
    add_scaled(sens, h / 3.0, &work.dk[1]);
    add_scaled(sens, h / 3.0, &work.dk[2]);
    add_scaled(sens, h / 6.0, &work.dk[3]);
    if all_finite(x) && sens.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(IntegrationError { step })
    }
}
