//! Virtual-trajectory tracking OCP and its local solver.
//!
//! Decision variables are the real joint-velocity plan `u` (N x n) and the
//! virtual plan `u_s` (N x n). States are eliminated by single shooting with
//! the Euler integrator `x_{k+1} = x_k + dt u_k`, so the dynamics hold by
//! construction. The virtual terminal input `u^s_N` is identically zero, which
//! is the steady-state condition of the integrator.
//!
//! The cost is
//!
//! ```text
//! J = ||x_N - x^s_N||_P^2 + d_y(y_d, h(x^s_N))
//!     + sum_{k<N} ||x_k - x^s_N||_Q^2 + ||u_k||_R^2
//! ```
//!
//! Inequalities (joint box, velocity box, obstacle clearance of every
//! collision point for both trajectories) are handled with an augmented
//! Lagrangian; each inner problem is minimized with damped Gauss-Newton
//! steps and an Armijo backtracking line search.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kinematics::{
    forward_kinematics, jacobian, pose_distance, wrap_angle, ArmModel, Obstacle, Pose2,
};
use crate::nn::{GradCheckReport, FD_FLOOR, FD_STEP};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MIN_STEP: f64 = 1e-10;
const STALL_RATIO: f64 = 0.95;
const STALL_LIMIT: usize = 2;
const INNER_TOL_MAX: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    /// Prediction horizon `N`.
    pub horizon: usize,
    pub dt: f64,
    pub q_weights: Vec<f64>,
    pub r_weights: Vec<f64>,
    pub p_weights: Vec<f64>,
    pub w_p: f64,
    pub w_r: f64,
    pub obstacles: Vec<Obstacle>,
    pub solver_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self::desk(3)
    }
}

impl OcpConfig {
    /// Desk-scale defaults for an `n`-joint arm, without obstacles.
    pub fn desk(n: usize) -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            q_weights: vec![1.0; n],
            r_weights: vec![0.1; n],
            p_weights: vec![10.0; n],
            w_p: 1000.0,
            w_r: 10.0,
            obstacles: Vec::new(),
            solver_tol: 1e-6,
            max_outer: 15,
            max_inner: 100,
            penalty_init: 10.0,
            penalty_growth: 5.0,
        }
    }

    pub fn with_obstacles(mut self, obstacles: Vec<Obstacle>) -> Self {
        self.obstacles = obstacles;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        check_len("q_weights", n, self.q_weights.len())?;
        check_len("r_weights", n, self.r_weights.len())?;
        check_len("p_weights", n, self.p_weights.len())?;
        let weights = self
            .q_weights
            .iter()
            .chain(&self.r_weights)
            .chain(&self.p_weights);
        // w_p / w_r may be zero to track position or orientation only.
        if weights.clone().any(|&w| !(w > 0.0)) || !(self.w_p >= 0.0) || !(self.w_r >= 0.0) {
            return Err(Error::config("cost weights must be positive"));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::config("solver_tol must be positive"));
        }
        if !(self.penalty_growth > 1.0) || !(self.penalty_init > 0.0) {
            return Err(Error::config(
                "penalty_init must be positive and penalty_growth above one",
            ));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::config("iteration caps must be at least 1"));
        }
        for o in &self.obstacles {
            Obstacle::new(o.center, o.inv_radii())?;
        }
        Ok(())
    }
}

/// Plan-space distance above which two plans count as different modes:
/// `0.5 * sqrt(N n)` rad/s in flattened Euclidean distance.
pub fn mode_threshold(horizon: usize, dof: usize) -> f64 {
    0.5 * ((horizon * dof) as f64).sqrt()
}

/// Euclidean distance between two flattened plans.
pub fn plan_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Shift a row-major `N x n` plan forward one step, repeating the last row.
pub fn shift_plan(plan: &[f64], dof: usize) -> Vec<f64> {
    if plan.len() <= dof {
        return plan.to_vec();
    }
    let mut out = plan[dof..].to_vec();
    out.extend_from_slice(&plan[plan.len() - dof..]);
    out
}

/// Decision vector of the OCP. Both plans are row-major `N x n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub horizon: usize,
    pub dof: usize,
    pub u: Vec<f64>,
    /// Virtual inputs `u^s_0 .. u^s_{N-1}`; `u^s_N` is zero and not stored.
    pub u_s: Vec<f64>,
}

impl DecisionVector {
    pub fn zeros(horizon: usize, dof: usize) -> Self {
        Self {
            horizon,
            dof,
            u: vec![0.0; horizon * dof],
            u_s: vec![0.0; horizon * dof],
        }
    }

    pub fn from_parts(horizon: usize, dof: usize, u: Vec<f64>, u_s: Vec<f64>) -> Result<Self> {
        check_len("decision u", horizon * dof, u.len())?;
        check_len("decision u_s", horizon * dof, u_s.len())?;
        Ok(Self {
            horizon,
            dof,
            u,
            u_s,
        })
    }

    /// `[u, u_s]` concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut z = self.u.clone();
        z.extend_from_slice(&self.u_s);
        z
    }

    pub fn from_flat(horizon: usize, dof: usize, z: &[f64]) -> Result<Self> {
        let m = horizon * dof;
        check_len("flat decision vector", 2 * m, z.len())?;
        Ok(Self {
            horizon,
            dof,
            u: z[..m].to_vec(),
            u_s: z[m..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.u_s).all(|v| v.is_finite())
    }

    /// Receding-horizon shift of both plans, repeating the last entry.
    pub fn shifted(&self) -> Self {
        Self {
            horizon: self.horizon,
            dof: self.dof,
            u: shift_plan(&self.u, self.dof),
            u_s: shift_plan(&self.u_s, self.dof),
        }
    }

    /// Clip every input to the velocity box.
    pub fn clamp_to(&self, model: &ArmModel) -> Self {
        let clamp = |plan: &[f64]| -> Vec<f64> {
            plan.iter()
                .enumerate()
                .map(|(i, v)| {
                    let lim = model.vel_limit()[i % self.dof];
                    v.clamp(-lim, lim)
                })
                .collect()
        };
        Self {
            horizon: self.horizon,
            dof: self.dof,
            u: clamp(&self.u),
            u_s: clamp(&self.u_s),
        }
    }

    fn check(&self, cfg: &OcpConfig, model: &ArmModel) -> Result<()> {
        check_len("decision horizon", cfg.horizon, self.horizon)?;
        check_len("decision dof", model.dof(), self.dof)?;
        check_len("decision u", self.horizon * self.dof, self.u.len())?;
        check_len("decision u_s", self.horizon * self.dof, self.u_s.len())
    }
}

/// A local solution together with its KKT diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcpSolution {
    pub xi: DecisionVector,
    /// Real states `x_0 .. x_N`.
    pub x_pred: Vec<Vec<f64>>,
    /// Virtual states `x^s_0 .. x^s_N`.
    pub x_s_pred: Vec<Vec<f64>>,
    pub cost: f64,
    /// `||grad_xi L||_inf` at the returned multipliers.
    pub kkt_residual: f64,
    /// `max(0, max_j g_j)`.
    pub max_violation: f64,
    pub converged: bool,
    /// Total Gauss-Newton iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    /// One multiplier per entry of [`constraint_residuals`].
    pub multipliers: Vec<f64>,
}

/// Euler rollout `x_{k+1} = x_k + dt u_k` of a row-major plan.
pub fn rollout(x0: &[f64], u: &[f64], dt: f64) -> Result<Vec<Vec<f64>>> {
    let n = x0.len();
    if n == 0 || u.len() % n != 0 {
        return Err(Error::Dimension {
            context: "rollout plan",
            expected: n * (u.len() / n.max(1)).max(1),
            actual: u.len(),
        });
    }
    let mut xs = Vec::with_capacity(u.len() / n + 1);
    let mut x = x0.to_vec();
    xs.push(x.clone());
    for step in u.chunks_exact(n) {
        for (xi, ui) in x.iter_mut().zip(step) {
            *xi += dt * ui;
        }
        xs.push(x.clone());
    }
    Ok(xs)
}

fn weighted_sq(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(w)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum()
}

/// Tracking cost of a decision vector, evaluated literally from rollouts.
pub fn ocp_cost(
    cfg: &OcpConfig,
    model: &ArmModel,
    x0: &[f64],
    yd: &Pose2,
    xi: &DecisionVector,
) -> Result<f64> {
    check_len("ocp x0", model.dof(), x0.len())?;
    xi.check(cfg, model)?;
    let xs = rollout(x0, &xi.u, cfg.dt)?;
    let xv = rollout(x0, &xi.u_s, cfg.dt)?;
    let n_steps = cfg.horizon;
    let target = &xv[n_steps];
    let zero = vec![0.0; model.dof()];
    let mut cost = weighted_sq(&xs[n_steps], target, &cfg.p_weights);
    let ys = crate::kinematics::end_effector(model, target)?;
    cost += pose_distance(yd, &ys, cfg.w_p, cfg.w_r);
    for k in 0..n_steps {
        let uk = &xi.u[k * model.dof()..(k + 1) * model.dof()];
        cost += weighted_sq(&xs[k], target, &cfg.q_weights);
        cost += weighted_sq(uk, &zero, &cfg.r_weights);
    }
    Ok(cost)
}

/// Number of entries returned by [`constraint_residuals`].
pub fn constraint_count(cfg: &OcpConfig, model: &ArmModel) -> usize {
    let n = model.dof();
    let per_traj = 2 * n * cfg.horizon // joint box, k = 1..N
        + 2 * n * cfg.horizon // velocity box, k = 0..N-1
        + cfg.horizon * cfg.obstacles.len() * model.collision_point_count();
    2 * per_traj
}

/// Inequality residuals `g(xi) <= 0` for the real and the virtual trajectory.
///
/// Layout, repeated for the real then the virtual trajectory:
/// joint box (`x_{k,j} - hi_j`, `lo_j - x_{k,j}` for k = 1..N), velocity box
/// (`u_{k,j} - v_j`, `-v_j - u_{k,j}` for k = 0..N-1), then obstacle
/// clearance `1 - ||(p - o) * s||` for every k = 1..N, obstacle and collision
/// point. The initial state is a parameter, not a decision, and is not
/// constrained.
pub fn constraint_residuals(
    cfg: &OcpConfig,
    model: &ArmModel,
    x0: &[f64],
    xi: &DecisionVector,
) -> Result<Vec<f64>> {
    check_len("ocp x0", model.dof(), x0.len())?;
    xi.check(cfg, model)?;
    let problem = Problem::new(cfg, model, x0, None);
    Ok(problem
        .constraints(&xi.to_flat(), false)
        .into_iter()
        .map(|c| c.value)
        .collect())
}

/// Analytic gradient of [`ocp_cost`] with respect to the flattened
/// `[u, u_s]`.
pub fn ocp_cost_gradient(
    cfg: &OcpConfig,
    model: &ArmModel,
    x0: &[f64],
    yd: &Pose2,
    xi: &DecisionVector,
) -> Result<Vec<f64>> {
    check_len("ocp x0", model.dof(), x0.len())?;
    xi.check(cfg, model)?;
    let problem = Problem::new(cfg, model, x0, Some(*yd));
    Ok(problem
        .cost_and_grad(&xi.to_flat())
        .1
        .iter()
        .copied()
        .collect())
}

/// One inequality with (optionally) its dense gradient.
struct Constraint {
    value: f64,
    grad: Option<Vec<f64>>,
    /// Joint-space curvature of a nonlinear state constraint, present
    /// whenever the gradient is.
    curvature: Option<StateCurvature>,
}

/// `g` depends on `x_k = x_0 + dt sum_{i<k} u_i` of the plan at `offset`.
struct StateCurvature {
    offset: usize,
    k: usize,
    grad_q: Vec<f64>,
    hess_q: DMatrix<f64>,
}

/// Eigenvalue-clipped positive semidefinite part of a symmetric matrix.
fn psd_part(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Add `block` to every `(i, i')` block with `i, i' < steps` of the plan at
/// `offset`, the pattern of a function of `sum_{i<steps} u_i`.
fn spread_block(h: &mut DMatrix<f64>, block: &DMatrix<f64>, offset: usize, steps: usize, n: usize) {
    for a in 0..steps {
        for b in 0..steps {
            for i in 0..n {
                for j in 0..n {
                    h[(offset + a * n + i, offset + b * n + j)] += block[(i, j)];
                }
            }
        }
    }
}

/// Precomputed structure of one OCP instance.
struct Problem<'a> {
    cfg: &'a OcpConfig,
    model: &'a ArmModel,
    x0: &'a [f64],
    yd: Option<Pose2>,
    n: usize,
    m: usize,
    /// Hessian of the quadratic (linear-residual) part of the cost. It does
    /// not depend on `x0` because `x_k - x^s_N` cancels the initial state.
    h_quad: DMatrix<f64>,
}

impl<'a> Problem<'a> {
    fn new(cfg: &'a OcpConfig, model: &'a ArmModel, x0: &'a [f64], yd: Option<Pose2>) -> Self {
        let n = model.dof();
        let horizon = cfg.horizon;
        let m = horizon * n;
        let dt2 = cfg.dt * cfg.dt;
        let mut h = DMatrix::zeros(2 * m, 2 * m);
        for j in 0..n {
            let (q, r, p) = (cfg.q_weights[j], cfg.r_weights[j], cfg.p_weights[j]);
            for a in 0..horizon {
                // Stage terms k in (a, N) see u_a; the terminal term sees all.
                let later = |i: usize| (horizon - 1 - i) as f64;
                for b in 0..horizon {
                    let uu =
                        2.0 * dt2 * (q * later(a.max(b)) + p) + if a == b { 2.0 * r } else { 0.0 };
                    h[(a * n + j, b * n + j)] = uu;
                    let us = -2.0 * dt2 * (q * later(a) + p);
                    h[(a * n + j, m + b * n + j)] = us;
                    h[(m + b * n + j, a * n + j)] = us;
                    h[(m + a * n + j, m + b * n + j)] = 2.0 * dt2 * (q * horizon as f64 + p);
                }
            }
        }
        Self {
            cfg,
            model,
            x0,
            yd,
            n,
            m,
            h_quad: h,
        }
    }

    fn dim(&self) -> usize {
        2 * self.m
    }

    /// States `x_0..x_N` of the plan starting at `offset` in `z`.
    fn states(&self, z: &[f64], offset: usize) -> Vec<Vec<f64>> {
        rollout(self.x0, &z[offset..offset + self.m], self.cfg.dt).expect("sized plan")
    }

    fn virtual_terminal(&self, z: &[f64]) -> Vec<f64> {
        let mut s = self.x0.to_vec();
        for step in z[self.m..].chunks_exact(self.n) {
            for (si, ui) in s.iter_mut().zip(step) {
                *si += self.cfg.dt * ui;
            }
        }
        s
    }

    /// Output residuals `[sqrt(w_p) dx, sqrt(w_p) dy, sqrt(w_r) dtheta]` at
    /// the virtual terminal state.
    fn output_residuals(&self, s: &[f64]) -> [f64; 3] {
        let yd = self.yd.expect("cost needs a target");
        let ys = crate::kinematics::end_effector(self.model, s).expect("sized state");
        let (wp, wr) = (self.cfg.w_p.sqrt(), self.cfg.w_r.sqrt());
        [
            wp * (ys.px - yd.px),
            wp * (ys.py - yd.py),
            wr * wrap_angle(ys.theta() - yd.theta()),
        ]
    }

    /// Residuals with their Jacobian w.r.t. the virtual terminal state.
    fn output_residuals_jac(&self, s: &[f64]) -> ([f64; 3], DMatrix<f64>) {
        let (wp, wr) = (self.cfg.w_p.sqrt(), self.cfg.w_r.sqrt());
        let mut jac = jacobian(self.model, s).expect("sized state");
        for c in 0..self.n {
            jac[(0, c)] *= wp;
            jac[(1, c)] *= wp;
            jac[(2, c)] *= wr;
        }
        (self.output_residuals(s), jac)
    }

    fn cost(&self, z: &[f64]) -> f64 {
        let n = self.n;
        let s = self.virtual_terminal(z);
        // x_k - x^s_N, without the cancelling initial state.
        let mut err: Vec<f64> = s.iter().zip(self.x0).map(|(s, x)| x - s).collect();
        let mut quad = 0.0;
        for k in 0..self.cfg.horizon {
            for j in 0..n {
                let u = z[k * n + j];
                quad += self.cfg.q_weights[j] * err[j] * err[j] + self.cfg.r_weights[j] * u * u;
                err[j] += self.cfg.dt * u;
            }
        }
        quad += weighted_sq(&err, &vec![0.0; n], &self.cfg.p_weights);
        let r = self.output_residuals(&s);
        quad + r.iter().map(|v| v * v).sum::<f64>()
    }

    fn cost_and_grad(&self, z: &[f64]) -> (f64, DVector<f64>) {
        let zv = DVector::from_column_slice(z);
        let hz = &self.h_quad * &zv;
        let quad = 0.5 * zv.dot(&hz);
        let (r, jac) = self.output_residuals_jac(&self.virtual_terminal(z));
        let mut grad = hz;
        // d s / d u^s_i = dt I for every step i.
        for c in 0..self.n {
            let g = 2.0 * self.cfg.dt * (0..3).map(|row| jac[(row, c)] * r[row]).sum::<f64>();
            for i in 0..self.cfg.horizon {
                grad[self.m + i * self.n + c] += g;
            }
        }
        (quad + r.iter().map(|v| v * v).sum::<f64>(), grad)
    }

    /// Curvature of the output distance, clipped to positive semidefinite.
    /// The orientation residual is linear in the joints, so only the
    /// position residual contributes second-order terms.
    fn output_hessian(&self, z: &[f64], h: &mut DMatrix<f64>) {
        let s = self.virtual_terminal(z);
        let (r, jac) = self.output_residuals_jac(&s);
        let (_, joints) = forward_kinematics(self.model, &s).expect("sized state");
        let ee = joints[self.n];
        let wp = self.cfg.w_p.sqrt();
        let mut hq = jac.transpose() * &jac;
        for a in 0..self.n {
            for b in 0..self.n {
                let origin = joints[a.max(b)];
                hq[(a, b)] -= wp * (r[0] * (ee[0] - origin[0]) + r[1] * (ee[1] - origin[1]));
            }
        }
        let block = psd_part(hq) * (2.0 * self.cfg.dt * self.cfg.dt);
        spread_block(h, &block, self.m, self.cfg.horizon, self.n);
    }

    /// All constraints in the documented order. Gradients are only built for
    /// the entries `want_grad` selects.
    fn constraints_with(
        &self,
        z: &[f64],
        mut want_grad: impl FnMut(f64, usize) -> bool,
    ) -> Vec<Constraint> {
        let n = self.n;
        let horizon = self.cfg.horizon;
        let dt = self.cfg.dt;
        let model = self.model;
        let mut out = Vec::with_capacity(constraint_count(self.cfg, model));
        for offset in [0, self.m] {
            let xs = self.states(z, offset);
            // Gradient of a function of x_k with per-joint sensitivity w.
            let spread = |k: usize, w: &[f64]| -> Vec<f64> {
                let mut g = vec![0.0; 2 * self.m];
                for i in 0..k {
                    for j in 0..n {
                        g[offset + i * n + j] = dt * w[j];
                    }
                }
                g
            };
            for (k, x) in xs.iter().enumerate().skip(1) {
                for j in 0..n {
                    for (value, sign) in [
                        (x[j] - model.joint_hi()[j], 1.0),
                        (model.joint_lo()[j] - x[j], -1.0),
                    ] {
                        let idx = out.len();
                        let grad = want_grad(value, idx).then(|| {
                            let mut w = vec![0.0; n];
                            w[j] = sign;
                            spread(k, &w)
                        });
                        out.push(Constraint {
                            value,
                            grad,
                            curvature: None,
                        });
                    }
                }
            }
            for k in 0..horizon {
                for j in 0..n {
                    let u = z[offset + k * n + j];
                    let lim = model.vel_limit()[j];
                    for (value, sign) in [(u - lim, 1.0), (-lim - u, -1.0)] {
                        let idx = out.len();
                        let grad = want_grad(value, idx).then(|| {
                            let mut g = vec![0.0; 2 * self.m];
                            g[offset + k * n + j] = sign;
                            g
                        });
                        out.push(Constraint {
                            value,
                            grad,
                            curvature: None,
                        });
                    }
                }
            }
            if self.cfg.obstacles.is_empty() {
                continue;
            }
            let per_link = model.collision_point_count() / n;
            for (k, x) in xs.iter().enumerate().skip(1) {
                let points = model.collision_points(x);
                let mut joints = None;
                for obs in &self.cfg.obstacles {
                    for (pi, (p, pjac)) in points.iter().enumerate() {
                        let (margin, dm) = obs.point_margin_grad(*p);
                        let value = -margin;
                        let idx = out.len();
                        if !want_grad(value, idx) {
                            out.push(Constraint {
                                value,
                                grad: None,
                                curvature: None,
                            });
                            continue;
                        }
                        let grad_q: Vec<f64> = pjac
                            .iter()
                            .map(|col| -(dm[0] * col[0] + dm[1] * col[1]))
                            .collect();
                        // d2p/dq_a dq_b = -(p - origin of link max(a, b)) for
                        // joints proximal to the point, zero otherwise.
                        let joints = joints.get_or_insert_with(|| {
                            forward_kinematics(model, x).expect("sized state").1
                        });
                        let link = pi / per_link;
                        let hp = obs.point_margin_hessian(*p);
                        let mut hess_q = DMatrix::zeros(n, n);
                        for a in 0..n {
                            for b in 0..n {
                                let (ca, cb) = (pjac[a], pjac[b]);
                                let mut v = 0.0;
                                for r in 0..2 {
                                    for c in 0..2 {
                                        v -= ca[r] * hp[r][c] * cb[c];
                                    }
                                }
                                if a.max(b) <= link {
                                    let o = joints[a.max(b)];
                                    v += dm[0] * (p[0] - o[0]) + dm[1] * (p[1] - o[1]);
                                }
                                hess_q[(a, b)] = v;
                            }
                        }
                        out.push(Constraint {
                            value,
                            grad: Some(spread(k, &grad_q)),
                            curvature: Some(StateCurvature {
                                offset,
                                k,
                                grad_q,
                                hess_q,
                            }),
                        });
                    }
                }
            }
        }
        out
    }

    fn constraints(&self, z: &[f64], with_grad: bool) -> Vec<Constraint> {
        self.constraints_with(z, |_, _| with_grad)
    }

    /// Augmented Lagrangian value.
    fn merit(&self, z: &[f64], lambda: &[f64], rho: f64) -> f64 {
        let mut val = self.cost(z);
        for (c, l) in self.constraints(z, false).iter().zip(lambda) {
            let h = (c.value + l / rho).max(0.0);
            val += 0.5 * rho * h * h - l * l / (2.0 * rho);
        }
        val
    }

    /// Merit, gradient and the active constraint gradients (with their
    /// penalty-weighted multipliers) at `z`.
    fn merit_grad(
        &self,
        z: &[f64],
        lambda: &[f64],
        rho: f64,
    ) -> (f64, DVector<f64>, Vec<(f64, Constraint)>) {
        let (cost, mut grad) = self.cost_and_grad(z);
        let mut val = cost;
        let mut active = Vec::new();
        let cons = self.constraints_with(z, |v, idx| v + lambda[idx] / rho > 0.0);
        for (c, l) in cons.into_iter().zip(lambda) {
            let h = (c.value + l / rho).max(0.0);
            val += 0.5 * rho * h * h - l * l / (2.0 * rho);
            if let Some(g) = &c.grad {
                for (gi, ci) in grad.iter_mut().zip(g) {
                    *gi += rho * h * ci;
                }
                active.push((h, c));
            }
        }
        (val, grad, active)
    }

    fn solve(&self, z_init: Vec<f64>) -> Result<OcpSolution> {
        let cfg = self.cfg;
        let dim = self.dim();
        let n_cons = constraint_count(cfg, self.model);
        let mut z = z_init;
        let mut lambda = vec![0.0; n_cons];
        let mut rho = cfg.penalty_init;
        let mut prev_violation = f64::INFINITY;
        let mut iterations = 0;
        let mut outer_iterations = 0;
        let mut converged = false;
        let mut kkt = f64::INFINITY;
        let mut violation = f64::INFINITY;
        let mut stalled = 0;

        for _ in 0..cfg.max_outer {
            outer_iterations += 1;
            // Loose inner solves while far from feasible.
            let inner_tol = (0.1 * prev_violation).clamp(cfg.solver_tol, INNER_TOL_MAX);
            for _ in 0..cfg.max_inner {
                let (merit, grad, active) = self.merit_grad(&z, &lambda, rho);
                if grad.amax() <= inner_tol {
                    break;
                }
                iterations += 1;
                let mut h = self.h_quad.clone();
                self.output_hessian(&z, &mut h);
                for (shift, c) in &active {
                    match (&c.curvature, &c.grad) {
                        (Some(curv), _) => {
                            let w = DVector::from_column_slice(&curv.grad_q);
                            let block = (&w * w.transpose() + &curv.hess_q * *shift) * rho;
                            let block = psd_part(block) * (cfg.dt * cfg.dt);
                            spread_block(&mut h, &block, curv.offset, curv.k, self.n);
                        }
                        (None, Some(g)) => {
                            let nz: Vec<usize> = (0..dim).filter(|&i| g[i] != 0.0).collect();
                            for &a in &nz {
                                for &b in &nz {
                                    h[(a, b)] += rho * g[a] * g[b];
                                }
                            }
                        }
                        (None, None) => {}
                    }
                }
                let step = damped_solve(h, &grad);
                let slope = grad.dot(&step);
                let mut alpha = 1.0;
                let mut accepted = None;
                while alpha >= MIN_STEP {
                    let trial: Vec<f64> = z
                        .iter()
                        .zip(step.iter())
                        .map(|(a, d)| a + alpha * d)
                        .collect();
                    let value = self.merit(&trial, &lambda, rho);
                    if value.is_finite() && value <= merit + ARMIJO_C * alpha * slope {
                        accepted = Some(trial);
                        break;
                    }
                    alpha *= BACKTRACK;
                }
                match accepted {
                    Some(trial) => {
                        if trial.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Diverged {
                                iterations,
                                last: z,
                            });
                        }
                        z = trial;
                    }
                    // No decrease representable at this scale.
                    None => break,
                }
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iterations,
                    last: z,
                });
            }

            // First-order multiplier update; the inner gradient at the new
            // multipliers is the Lagrangian gradient.
            let cons = self.constraints(&z, false);
            violation = 0.0;
            for (c, l) in cons.iter().zip(lambda.iter_mut()) {
                *l = (*l + rho * c.value).max(0.0);
                violation = f64::max(violation, c.value);
            }
            kkt = self.lagrangian_grad(&z, &lambda).amax();
            if !kkt.is_finite() {
                return Err(Error::Diverged {
                    iterations,
                    last: z,
                });
            }
            if kkt <= cfg.solver_tol && violation <= cfg.solver_tol {
                converged = true;
                break;
            }
            if violation > cfg.solver_tol && violation > 0.25 * prev_violation {
                // Stuck at an infeasible stationary point of the violation;
                // more penalty only worsens the conditioning.
                stalled = if violation > STALL_RATIO * prev_violation {
                    stalled + 1
                } else {
                    0
                };
                if stalled >= STALL_LIMIT {
                    break;
                }
                rho *= cfg.penalty_growth;
            }
            prev_violation = violation;
        }

        let xi = DecisionVector::from_flat(cfg.horizon, self.n, &z)?;
        let yd = self.yd.expect("solve needs a target");
        Ok(OcpSolution {
            x_pred: self.states(&z, 0),
            x_s_pred: self.states(&z, self.m),
            cost: ocp_cost(cfg, self.model, self.x0, &yd, &xi)?,
            xi,
            kkt_residual: kkt,
            max_violation: violation,
            converged,
            iterations,
            outer_iterations,
            multipliers: lambda,
        })
    }

    fn lagrangian_grad(&self, z: &[f64], lambda: &[f64]) -> DVector<f64> {
        let (_, mut grad) = self.cost_and_grad(z);
        let cons = self.constraints_with(z, |_, idx| lambda[idx] > 0.0);
        for (c, l) in cons.into_iter().zip(lambda) {
            if let Some(g) = c.grad {
                for (gi, ci) in grad.iter_mut().zip(&g) {
                    *gi += l * ci;
                }
            }
        }
        grad
    }
}

/// Solve `(H + mu I) d = -g`, raising the damping until the factorization
/// succeeds. The virtual plan only enters through its sum, so `H` is
/// singular along differences of virtual inputs and always needs some
/// damping.
fn damped_solve(h: DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let scale = h.diagonal().amax().max(1.0);
    let mut mu = 1e-9 * scale;
    loop {
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += mu;
        }
        if let Some(chol) = damped.cholesky() {
            return -chol.solve(grad);
        }
        mu *= 100.0;
        if mu > 1e12 * scale {
            return -grad / scale;
        }
    }
}

/// Solve the OCP locally from `xi_init`, which is first clipped to the
/// velocity box.
pub fn solve_local(
    cfg: &OcpConfig,
    model: &ArmModel,
    x0: &[f64],
    yd: &Pose2,
    xi_init: &DecisionVector,
) -> Result<OcpSolution> {
    cfg.validate(model.dof())?;
    check_len("ocp x0", model.dof(), x0.len())?;
    xi_init.check(cfg, model)?;
    if !xi_init.is_finite() {
        return Err(Error::NonFinite {
            context: "initial decision vector".into(),
        });
    }
    let problem = Problem::new(cfg, model, x0, Some(*yd));
    problem.solve(xi_init.clamp_to(model).to_flat())
}

/// Uniform draw over the velocity box for both plans.
pub fn random_initial_guess<R: Rng + ?Sized>(
    cfg: &OcpConfig,
    model: &ArmModel,
    rng: &mut R,
) -> DecisionVector {
    let n = model.dof();
    let mut draw = || -> Vec<f64> {
        (0..cfg.horizon * n)
            .map(|i| {
                let lim = model.vel_limit()[i % n];
                rng.random_range(-lim..=lim)
            })
            .collect()
    };
    let u = draw();
    let u_s = draw();
    DecisionVector {
        horizon: cfg.horizon,
        dof: n,
        u,
        u_s,
    }
}

/// Independent RNG stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Outcome of a multi-start solve.
#[derive(Debug)]
pub struct MultiStart {
    /// Successful solves sorted by cost (ties by start index).
    pub solutions: Vec<OcpSolution>,
    /// Start index of each entry of `solutions`.
    pub starts: Vec<usize>,
    /// Starts whose local solve failed.
    pub failures: Vec<(usize, Error)>,
}

/// `count` local solves from independent uniform initial guesses. Start `i`
/// draws from stream `i` of `seed`, so the result does not depend on the
/// number of worker threads.
pub fn solve_multistart(
    cfg: &OcpConfig,
    model: &ArmModel,
    x0: &[f64],
    yd: &Pose2,
    count: usize,
    seed: u64,
) -> Result<MultiStart> {
    if count == 0 {
        return Err(Error::config("multi-start needs at least one start"));
    }
    cfg.validate(model.dof())?;
    let results: Vec<(usize, Result<OcpSolution>)> = (0..count)
        .into_par_iter()
        .map(|start| {
            let mut rng = stream_rng(seed, start as u64);
            let init = random_initial_guess(cfg, model, &mut rng);
            (start, solve_local(cfg, model, x0, yd, &init))
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (start, res) in results {
        match res {
            Ok(sol) => ok.push((start, sol)),
            Err(e) => failures.push((start, e)),
        }
    }
    ok.sort_by(|a, b| a.1.cost.total_cmp(&b.1.cost).then(a.0.cmp(&b.0)));
    let (starts, solutions) = ok.into_iter().unzip();
    Ok(MultiStart {
        solutions,
        starts,
        failures,
    })
}

/// Initial guess for the next control step: both plans shifted by one.
pub fn warm_start_shift(prev: &OcpSolution) -> DecisionVector {
    prev.xi.shifted()
}

/// One step of the expert policy: a warm-started solve when `warm` is given,
/// then up to `attempts` solves from uniform random guesses until one
/// converges. Returns the first converged solution, otherwise the attempt
/// with the smallest violation (flagged `converged == false`).
pub fn expert_solve<R: Rng + ?Sized>(
    cfg: &OcpConfig,
    model: &ArmModel,
    x0: &[f64],
    yd: &Pose2,
    warm: Option<&DecisionVector>,
    attempts: usize,
    rng: &mut R,
) -> Result<OcpSolution> {
    let mut best: Option<OcpSolution> = None;
    let mut last_err = None;
    let mut consider = |res: Result<OcpSolution>, best: &mut Option<OcpSolution>| match res {
        Ok(sol) if sol.converged => Some(sol),
        Ok(sol) => {
            if best
                .as_ref()
                .map_or(true, |b| sol.max_violation < b.max_violation)
            {
                *best = Some(sol);
            }
            None
        }
        Err(e) => {
            last_err = Some(e);
            None
        }
    };
    if let Some(init) = warm {
        if let Some(sol) = consider(solve_local(cfg, model, x0, yd, init), &mut best) {
            return Ok(sol);
        }
    }
    for _ in 0..attempts {
        let init = random_initial_guess(cfg, model, rng);
        if let Some(sol) = consider(solve_local(cfg, model, x0, yd, &init), &mut best) {
            return Ok(sol);
        }
    }
    match (best, last_err) {
        (Some(sol), _) => Ok(sol),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::config(
            "expert needs a warm start or at least one attempt",
        )),
    }
}

/// Central-difference check of [`ocp_cost_gradient`] on one random instance:
/// largest absolute error relative to the largest difference quotient.
pub fn cost_grad_check_instance<R: Rng + ?Sized>(
    cfg: &OcpConfig,
    model: &ArmModel,
    rng: &mut R,
) -> Result<f64> {
    let n = model.dof();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let yd = Pose2::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-3.0..3.0),
    );
    let xi = random_initial_guess(cfg, model, rng);
    let grad = ocp_cost_gradient(cfg, model, &x0, &yd, &xi)?;
    let z = xi.to_flat();
    let cost_at = |z: &[f64]| {
        ocp_cost(
            cfg,
            model,
            &x0,
            &yd,
            &DecisionVector::from_flat(cfg.horizon, n, z)?,
        )
    };
    let (mut max_err, mut max_ref) = (0.0f64, 0.0f64);
    let mut zp = z.clone();
    for i in 0..z.len() {
        zp[i] = z[i] + FD_STEP;
        let fp = cost_at(&zp)?;
        zp[i] = z[i] - FD_STEP;
        let fm = cost_at(&zp)?;
        zp[i] = z[i];
        let fd = (fp - fm) / (2.0 * FD_STEP);
        max_err = max_err.max((fd - grad[i]).abs());
        max_ref = max_ref.max(fd.abs());
    }
    Ok(max_err / max_ref.max(FD_FLOOR))
}

/// Runs [`cost_grad_check_instance`] on `instances` random problems drawn
/// from stream 0 of `seed`; fails when the worst error reaches `tolerance`.
pub fn cost_grad_check(
    cfg: &OcpConfig,
    model: &ArmModel,
    instances: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    cfg.validate(model.dof())?;
    let mut rng = stream_rng(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        worst = worst.max(cost_grad_check_instance(cfg, model, &mut rng)?);
    }
    let report = GradCheckReport {
        instances,
        max_rel_error: worst,
        tolerance,
    };
    if !report.passed() {
        return Err(Error::GradCheck {
            max_rel_error: worst,
            tolerance,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::end_effector;

    fn desk_problem() -> (OcpConfig, ArmModel) {
        (OcpConfig::desk(3), ArmModel::desk())
    }

    #[test]
    fn rollout_examples() {
        let xs = rollout(&[0.3, -0.1], &[0.0; 8], 0.1).unwrap();
        assert!(xs.iter().all(|x| x == &vec![0.3, -0.1]));
        let xs = rollout(&[0.0], &[1.0, 1.0], 0.1).unwrap();
        assert_eq!(xs, vec![vec![0.0], vec![0.1], vec![0.1 + 0.1]]);
        assert!(rollout(&[0.0, 0.0], &[1.0; 3], 0.1).is_err());
    }

    #[test]
    fn rollout_telescopes() {
        let mut rng = stream_rng(3, 0);
        let u: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x0 = [0.2, -0.4, 1.0];
        let xs = rollout(&x0, &u, 0.1).unwrap();
        for j in 0..3 {
            let sum: f64 = u.iter().skip(j).step_by(3).sum();
            assert!((xs[20][j] - (x0[j] + 0.1 * sum)).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_zero_at_steady_target() {
        let (cfg, model) = desk_problem();
        let x0 = [0.3, 0.5, -0.2];
        let yd = end_effector(&model, &x0).unwrap();
        let xi = DecisionVector::zeros(20, 3);
        assert_eq!(ocp_cost(&cfg, &model, &x0, &yd, &xi).unwrap(), 0.0);
        let shifted = Pose2::new(yd.px, yd.py, yd.theta() + 2.0 * std::f64::consts::PI);
        let xi = DecisionVector {
            u: vec![0.3; 60],
            ..DecisionVector::zeros(20, 3)
        };
        let a = ocp_cost(&cfg, &model, &x0, &yd, &xi).unwrap();
        let b = ocp_cost(&cfg, &model, &x0, &shifted, &xi).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cost_hand_evaluated_single_link() {
        let model = ArmModel::new(vec![1.0], vec![-3.0], vec![3.0], vec![2.0]).unwrap();
        let cfg = OcpConfig {
            horizon: 1,
            dt: 0.1,
            q_weights: vec![2.0],
            r_weights: vec![0.5],
            p_weights: vec![3.0],
            w_p: 4.0,
            w_r: 5.0,
            ..OcpConfig::desk(1)
        };
        let x0 = [0.2];
        let xi = DecisionVector::from_parts(1, 1, vec![1.5], vec![-0.5]).unwrap();
        let yd = Pose2::new(0.9, 0.1, 0.3);
        // x_1 = 0.35, x^s_1 = 0.15.
        let (x1, s) = (0.35f64, 0.15f64);
        let expected = 3.0 * (x1 - s).powi(2)
            + 4.0 * ((s.cos() - 0.9).powi(2) + (s.sin() - 0.1).powi(2))
            + 5.0 * (s - 0.3).powi(2)
            + 2.0 * (0.2 - s).powi(2)
            + 0.5 * 1.5f64.powi(2);
        let got = ocp_cost(&cfg, &model, &x0, &yd, &xi).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn quadratic_structure_matches_literal_cost() {
        let (cfg, model) = desk_problem();
        let mut rng = stream_rng(11, 0);
        for _ in 0..5 {
            let x0: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let yd = Pose2::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.4,
            );
            let xi = random_initial_guess(&cfg, &model, &mut rng);
            let problem = Problem::new(&cfg, &model, &x0, Some(yd));
            let literal = ocp_cost(&cfg, &model, &x0, &yd, &xi).unwrap();
            let structured = problem.cost(&xi.to_flat());
            assert!((literal - structured).abs() < 1e-9 * literal.max(1.0));
        }
    }

    #[test]
    fn cost_gradient_matches_finite_differences() {
        let (cfg, model) = desk_problem();
        let report = cost_grad_check(&cfg, &model, 20, 5, 1e-5).unwrap();
        assert!(report.passed(), "relative error {}", report.max_rel_error);
    }

    /// Enumerate constraint residuals one by one, straight from the layout
    /// description.
    fn enumerate_residuals(
        cfg: &OcpConfig,
        model: &ArmModel,
        x0: &[f64],
        xi: &DecisionVector,
    ) -> Vec<f64> {
        let n = model.dof();
        let mut out = Vec::new();
        for plan in [&xi.u, &xi.u_s] {
            let mut x = x0.to_vec();
            let mut states = vec![];
            for k in 0..cfg.horizon {
                for j in 0..n {
                    x[j] += cfg.dt * plan[k * n + j];
                }
                states.push(x.clone());
            }
            for x in &states {
                for j in 0..n {
                    out.push(x[j] - model.joint_hi()[j]);
                    out.push(model.joint_lo()[j] - x[j]);
                }
            }
            for k in 0..cfg.horizon {
                for j in 0..n {
                    out.push(plan[k * n + j] - model.vel_limit()[j]);
                    out.push(-model.vel_limit()[j] - plan[k * n + j]);
                }
            }
            for x in &states {
                let (_, pts) = crate::kinematics::forward_kinematics(model, x).unwrap();
                for obs in &cfg.obstacles {
                    for p in &pts[1..] {
                        out.push(-obs.point_margin(*p));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constraint_layout_matches_enumeration() {
        let model = ArmModel::desk();
        let cfg = OcpConfig::desk(3).with_obstacles(vec![
            Obstacle::circle([0.75, 0.0], 0.2).unwrap(),
            Obstacle::circle([-0.3, 0.6], 0.1).unwrap(),
        ]);
        let mut rng = stream_rng(9, 0);
        let xi = random_initial_guess(&cfg, &model, &mut rng);
        let x0 = [0.1, 0.9, -0.4];
        let got = constraint_residuals(&cfg, &model, &x0, &xi).unwrap();
        let expected = enumerate_residuals(&cfg, &model, &x0, &xi);
        assert_eq!(got.len(), constraint_count(&cfg, &model));
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // 2 trajectories x (joint box 2nN + velocity box 2nN + N M n).
        assert_eq!(got.len(), 2 * (2 * 3 * 20 + 2 * 3 * 20 + 20 * 2 * 3));
    }

    #[test]
    fn constraint_examples() {
        let (cfg, model) = desk_problem();
        let x0 = [0.0, 0.5, 0.5];
        let xi = DecisionVector::zeros(20, 3);
        let g = constraint_residuals(&cfg, &model, &x0, &xi).unwrap();
        assert!(g.iter().all(|&v| v < 0.0));
        let mut xi = xi;
        xi.u[0] = model.vel_limit()[0] + 0.1;
        let g = constraint_residuals(&cfg, &model, &x0, &xi).unwrap();
        let vel_upper_u00 = 2 * 3 * 20;
        assert!((g[vel_upper_u00] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn constraint_gradients_match_finite_differences() {
        let model = ArmModel::desk();
        let cfg =
            OcpConfig::desk(3).with_obstacles(vec![Obstacle::circle([0.75, 0.0], 0.2).unwrap()]);
        let x0 = [0.3, 0.4, -0.5];
        let mut rng = stream_rng(21, 0);
        let z = random_initial_guess(&cfg, &model, &mut rng).to_flat();
        let problem = Problem::new(&cfg, &model, &x0, None);
        let cons = problem.constraints(&z, true);
        let h = 1e-6;
        for i in (0..z.len()).step_by(7) {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let cp = problem.constraints(&zp, false);
            let cm = problem.constraints(&zm, false);
            for (c, (p, m)) in cons.iter().zip(cp.iter().zip(&cm)) {
                let fd = (p.value - m.value) / (2.0 * h);
                let an = c.grad.as_ref().unwrap()[i];
                assert!((fd - an).abs() < 1e-6, "var {i}: {fd} vs {an}");
            }
        }
    }

    /// Closed-form optimum of the single-link, orientation-only problem:
    /// the cost is an exact quadratic in `(u_0..u_{N-1}, s)` where `s` is the
    /// virtual terminal angle, so the optimum solves its normal equations.
    fn single_link_lq_oracle(cfg: &OcpConfig, x0: f64, theta_d: f64) -> (Vec<f64>, f64) {
        let n_steps = cfg.horizon;
        let dim = n_steps + 1;
        let (q, r, p, wr, dt) = (
            cfg.q_weights[0],
            cfg.r_weights[0],
            cfg.p_weights[0],
            cfg.w_r,
            cfg.dt,
        );
        // Residual rows a.v - b with v = (u, s).
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for k in 0..n_steps {
            let mut a = vec![0.0; dim];
            for ai in a.iter_mut().take(k) {
                *ai = q.sqrt() * dt;
            }
            a[n_steps] = -q.sqrt();
            rows.push((a, -q.sqrt() * x0));
            let mut a = vec![0.0; dim];
            a[k] = r.sqrt();
            rows.push((a, 0.0));
        }
        let mut a = vec![p.sqrt() * dt; dim];
        a[n_steps] = -p.sqrt();
        rows.push((a, -p.sqrt() * x0));
        let mut a = vec![0.0; dim];
        a[n_steps] = wr.sqrt();
        rows.push((a, wr.sqrt() * theta_d));
        let mut ata = DMatrix::zeros(dim, dim);
        let mut atb = DVector::zeros(dim);
        for (a, b) in &rows {
            for i in 0..dim {
                atb[i] += a[i] * b;
                for j in 0..dim {
                    ata[(i, j)] += a[i] * a[j];
                }
            }
        }
        let v = ata.lu().solve(&atb).unwrap();
        (v.rows(0, n_steps).iter().copied().collect(), v[n_steps])
    }

    #[test]
    fn single_link_matches_closed_form() {
        let model = ArmModel::new(vec![1.0], vec![-3.0], vec![3.0], vec![50.0]).unwrap();
        let cfg = OcpConfig {
            w_p: 0.0,
            w_r: 10.0,
            ..OcpConfig::desk(1)
        };
        let x0 = [0.2];
        let theta_d = 1.1;
        let yd = Pose2::new(0.0, 0.0, theta_d);
        let sol = solve_local(&cfg, &model, &x0, &yd, &DecisionVector::zeros(20, 1)).unwrap();
        assert!(sol.converged, "{sol:?}");
        let (u, s) = single_link_lq_oracle(&cfg, x0[0], theta_d);
        for (a, b) in sol.xi.u.iter().zip(&u) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!((sol.x_s_pred[20][0] - s).abs() < 1e-5);
    }

    #[test]
    fn optimal_init_is_a_fixed_point() {
        let model = ArmModel::new(vec![1.0], vec![-3.0], vec![3.0], vec![50.0]).unwrap();
        let cfg = OcpConfig {
            w_p: 0.0,
            ..OcpConfig::desk(1)
        };
        let x0 = [0.2];
        let yd = Pose2::new(0.0, 0.0, 0.9);
        let first = solve_local(&cfg, &model, &x0, &yd, &DecisionVector::zeros(20, 1)).unwrap();
        let again = solve_local(&cfg, &model, &x0, &yd, &first.xi).unwrap();
        assert!(again.converged);
        assert!(again.outer_iterations <= 2);
        assert!((again.cost - first.cost).abs() < 1e-8);
    }

    #[test]
    fn desk_solve_converges_and_reaches() {
        let (cfg, model) = desk_problem();
        let x0 = [0.2, 0.4, -0.3];
        let yd = end_effector(&model, &[1.0, -0.6, 0.5]).unwrap();
        let mut rng = stream_rng(1, 0);
        let init = random_initial_guess(&cfg, &model, &mut rng);
        let sol = solve_local(&cfg, &model, &x0, &yd, &init).unwrap();
        assert!(
            sol.converged,
            "kkt {} viol {}",
            sol.kkt_residual, sol.max_violation
        );
        let ys = end_effector(&model, &sol.x_s_pred[20]).unwrap();
        assert!(pose_distance(&yd, &ys, cfg.w_p, cfg.w_r) < 0.05);
        assert_eq!(sol.x_pred[0], x0.to_vec());
        assert_eq!(sol.x_s_pred[0], x0.to_vec());
    }

    #[test]
    fn warm_start_shift_examples() {
        let xi =
            DecisionVector::from_parts(3, 1, vec![1.0, 2.0, 3.0], vec![0.5, 0.5, 0.5]).unwrap();
        let s = xi.shifted();
        assert_eq!(s.u, vec![2.0, 3.0, 3.0]);
        assert_eq!(s.u_s, vec![0.5, 0.5, 0.5]);
        let constant = DecisionVector::from_parts(3, 2, vec![0.7; 6], vec![0.1; 6]).unwrap();
        assert_eq!(constant.shifted(), constant);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, model) = desk_problem();
        let yd = Pose2::new(0.5, 0.5, 0.0);
        let mut xi = DecisionVector::zeros(20, 3);
        xi.u[3] = f64::NAN;
        assert!(matches!(
            solve_local(&cfg, &model, &[0.0; 3], &yd, &xi),
            Err(Error::NonFinite { .. })
        ));
        assert!(solve_local(&cfg, &model, &[0.0; 2], &yd, &DecisionVector::zeros(20, 3)).is_err());
        assert!(solve_multistart(&cfg, &model, &[0.0; 3], &yd, 0, 1).is_err());
    }
}
