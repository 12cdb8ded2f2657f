//! Normalized planar vertical take-off and landing aircraft.
//!
//! State `x = (y, z, theta, y_dot, z_dot, theta_dot)`, input `u = (u1, u2)`,
//! parameters `p = (p1, p2)` and context `q = (y_ref, z_ref, theta_dot_max,
//! theta_max)`:
//!
//! ```text
//! y''     = -u1 sin(theta) + p1 u2 cos(theta)
//! z''     =  u1 cos(theta) + p1 u2 sin(theta) - 1
//! theta'' =  p2 u2
//! ```

use std::sync::Arc;

use nalgebra::DMatrix;

use super::{Plant, ProblemBounds, ProblemDefinition};

const Q_DIAG: [f64; 6] = [1e3, 1e3, 1e3, 1.0, 1.0, 1.0];
const R_DIAG: [f64; 2] = [0.1, 0.1];
const U_TRIM: [f64; 2] = [1.0, 0.0];

/// Tunable constants of the built-in PVTOL benchmark. The values of `tau`,
/// `p_nom`, `p_std`, the state sampling box and the two constant context
/// bounds are defaults of this crate rather than published figures.
#[derive(Debug, Clone, PartialEq)]
pub struct PvtolConfig {
    pub tau: f64,
    pub p_nom: [f64; 2],
    pub p_std: [f64; 2],
    pub x_min: [f64; 6],
    pub x_max: [f64; 6],
    /// Bound on `|theta_dot|`, rad/s.
    pub theta_dot_max: f64,
    /// Bound on `|theta|`, rad.
    pub theta_max: f64,
    pub u_bound: f64,
}

impl Default for PvtolConfig {
    fn default() -> Self {
        Self {
            tau: 0.02,
            p_nom: [0.2, 5.0],
            p_std: [0.02, 0.5],
            // near-hover starts spread over the whole set-point square
            x_min: [-1.0, -1.0, -0.1, -0.1, -0.1, -0.1],
            x_max: [1.0, 1.0, 0.1, 0.1, 0.1, 0.1],
            theta_dot_max: 1.0,
            theta_max: 0.5,
            u_bound: 50.0,
        }
    }
}

/// PVTOL plant maps.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pvtol;

impl Pvtol {
    fn error(x: &[f64], q: &[f64]) -> [f64; 6] {
        [x[0] - q[0], x[1] - q[1], x[2], x[3], x[4], x[5]]
    }
}

impl Plant for Pvtol {
    fn n_constraints(&self) -> usize {
        4
    }

    fn rhs(&self, x: &[f64], u: &[f64], p: &[f64], dx: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        dx[0] = x[3];
        dx[1] = x[4];
        dx[2] = x[5];
        dx[3] = -u[0] * s + p[0] * u[1] * c;
        dx[4] = u[0] * c + p[0] * u[1] * s - 1.0;
        dx[5] = p[1] * u[1];
    }

    fn stage_cost(&self, x: &[f64], u: &[f64], _p: &[f64], q: &[f64]) -> f64 {
        let e = Self::error(x, q);
        let state: f64 = e.iter().zip(Q_DIAG).map(|(e, w)| w * e * e).sum();
        let input: f64 = u.iter().zip(U_TRIM).zip(R_DIAG).map(|((u, d), w)| w * (u - d).powi(2)).sum();
        state + input
    }

    fn terminal_penalty(&self, x: &[f64], _p: &[f64], q: &[f64]) -> f64 {
        let e = Self::error(x, q);
        e.iter().zip(Q_DIAG).map(|(e, w)| w * e * e).sum::<f64>().sqrt()
    }

    fn constraints(&self, x: &[f64], _u: &[f64], _p: &[f64], q: &[f64], c: &mut [f64]) {
        c[0] = x[5] - q[2];
        c[1] = -x[5] - q[2];
        c[2] = x[2] - q[3];
        c[3] = -x[2] - q[3];
    }

    fn trim_input(&self) -> Option<Vec<f64>> {
        Some(U_TRIM.to_vec())
    }

    fn rhs_jacobian(&self, x: &[f64], u: &[f64], p: &[f64], jx: &mut DMatrix<f64>, ju: &mut DMatrix<f64>) {
        let (s, c) = x[2].sin_cos();
        jx.fill(0.0);
        ju.fill(0.0);
        jx[(0, 3)] = 1.0;
        jx[(1, 4)] = 1.0;
        jx[(2, 5)] = 1.0;
        jx[(3, 2)] = -u[0] * c - p[0] * u[1] * s;
        jx[(4, 2)] = -u[0] * s + p[0] * u[1] * c;
        ju[(3, 0)] = -s;
        ju[(3, 1)] = p[0] * c;
        ju[(4, 0)] = c;
        ju[(4, 1)] = p[0] * s;
        ju[(5, 1)] = p[1];
    }

    fn stage_cost_gradient(&self, x: &[f64], u: &[f64], _p: &[f64], q: &[f64], gx: &mut [f64], gu: &mut [f64]) {
        let e = Self::error(x, q);
        for i in 0..6 {
            gx[i] = 2.0 * Q_DIAG[i] * e[i];
        }
        for j in 0..2 {
            gu[j] = 2.0 * R_DIAG[j] * (u[j] - U_TRIM[j]);
        }
    }

    fn terminal_penalty_gradient(&self, x: &[f64], p: &[f64], q: &[f64], gx: &mut [f64]) {
        let norm = self.terminal_penalty(x, p, q);
        let e = Self::error(x, q);
        for i in 0..6 {
            // subgradient 0 at the kink
            gx[i] = if norm > 0.0 { Q_DIAG[i] * e[i] / norm } else { 0.0 };
        }
    }

    fn constraints_jacobian(
        &self,
        _x: &[f64],
        _u: &[f64],
        _p: &[f64],
        _q: &[f64],
        cx: &mut DMatrix<f64>,
        cu: &mut DMatrix<f64>,
    ) {
        cx.fill(0.0);
        cu.fill(0.0);
        cx[(0, 5)] = 1.0;
        cx[(1, 5)] = -1.0;
        cx[(2, 2)] = 1.0;
        cx[(3, 2)] = -1.0;
    }
}

impl PvtolConfig {
    pub fn build(&self) -> crate::Result<ProblemDefinition> {
        let bounds = ProblemBounds {
            u_min: vec![-self.u_bound; 2],
            u_max: vec![self.u_bound; 2],
            x_min: self.x_min.to_vec(),
            x_max: self.x_max.to_vec(),
            q_min: vec![-1.0, -1.0, self.theta_dot_max, self.theta_max],
            q_max: vec![1.0, 1.0, self.theta_dot_max, self.theta_max],
            p_nom: self.p_nom.to_vec(),
            p_std: self.p_std.to_vec(),
        };
        ProblemDefinition::new("pvtol", self.tau, bounds, Arc::new(Pvtol))
    }
}

/// The PVTOL benchmark with [`PvtolConfig::default`] constants.
pub fn pvtol_problem() -> ProblemDefinition {
    PvtolConfig::default()
        .build()
        .expect("default PVTOL constants are valid")
}
