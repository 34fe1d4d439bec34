//! Planar serial-chain kinematics.
//!
//! The plant is an `n`-link planar arm with revolute joints. Joint `i`
//! rotates every link distal to it, so the absolute angle of link `i` is the
//! partial sum `q_0 + ... + q_i` and the end-effector orientation is the sum
//! of all joint angles.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Geometry and limits of a planar kinematic chain. Deserialized values
/// must be checked with [`ArmModel::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmModel {
    link_lengths: Vec<f64>,
    joint_lo: Vec<f64>,
    joint_hi: Vec<f64>,
    vel_limit: Vec<f64>,
    /// Extra collision sample points placed evenly inside every link, in
    /// addition to the link end points. Zero checks joints only.
    link_samples: usize,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::desk()
    }
}

impl ArmModel {
    pub fn new(
        link_lengths: Vec<f64>,
        joint_lo: Vec<f64>,
        joint_hi: Vec<f64>,
        vel_limit: Vec<f64>,
    ) -> Result<Self> {
        let n = link_lengths.len();
        if n == 0 {
            return Err(Error::config("arm needs at least one link"));
        }
        check_len("joint_lo", n, joint_lo.len())?;
        check_len("joint_hi", n, joint_hi.len())?;
        check_len("vel_limit", n, vel_limit.len())?;
        if link_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config("link lengths must be positive"));
        }
        if joint_lo.iter().zip(&joint_hi).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::config("joint_lo must be below joint_hi"));
        }
        if vel_limit.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("velocity limits must be positive"));
        }
        Ok(Self {
            link_lengths,
            joint_lo,
            joint_hi,
            vel_limit,
            link_samples: 0,
        })
    }

    /// The 3-link desk arm used by the default configuration: 1.2 m reach,
    /// +-2.8 rad joint range and 1.5 rad/s speed limit on every joint.
    pub fn desk() -> Self {
        Self::new(
            vec![0.5, 0.4, 0.3],
            vec![-2.8; 3],
            vec![2.8; 3],
            vec![1.5; 3],
        )
        .expect("desk arm is valid")
    }

    pub fn with_link_samples(mut self, samples: usize) -> Self {
        self.link_samples = samples;
        self
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    pub fn joint_lo(&self) -> &[f64] {
        &self.joint_lo
    }

    pub fn joint_hi(&self) -> &[f64] {
        &self.joint_hi
    }

    pub fn vel_limit(&self) -> &[f64] {
        &self.vel_limit
    }

    pub fn link_samples(&self) -> usize {
        self.link_samples
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Re-check the invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::new(
            self.link_lengths.clone(),
            self.joint_lo.clone(),
            self.joint_hi.clone(),
            self.vel_limit.clone(),
        )?;
        debug_assert_eq!(rebuilt.dof(), self.dof());
        Ok(())
    }

    /// Number of points checked against obstacles per configuration.
    pub fn collision_point_count(&self) -> usize {
        self.dof() * (1 + self.link_samples)
    }

    /// Positions of the collision points with their position Jacobians
    /// (2 x n each, column-major as `[dx/dq_j, dy/dq_j]`).
    ///
    /// Points are ordered link by link: the interior samples of link `i`
    /// followed by its end point. The base is fixed and never included.
    pub(crate) fn collision_points(&self, q: &[f64]) -> Vec<([f64; 2], Vec<[f64; 2]>)> {
        let n = self.dof();
        let mut out = Vec::with_capacity(self.collision_point_count());
        let mut angle = 0.0;
        let mut base = [0.0, 0.0];
        // (cos, sin, length) of every link so far, for the Jacobian columns.
        let mut links: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
        for i in 0..n {
            angle += q[i];
            let (s, c) = angle.sin_cos();
            let len = self.link_lengths[i];
            for k in 1..=self.link_samples + 1 {
                let frac = k as f64 / (self.link_samples + 1) as f64;
                let seg = len * frac;
                let p = [base[0] + seg * c, base[1] + seg * s];
                // d p / d q_j sums the perpendicular lever of every link that
                // joint j moves, up to and including this partial segment.
                let mut jac = vec![[0.0, 0.0]; n];
                for (j, col) in jac.iter_mut().enumerate().take(i + 1) {
                    let mut dx = -seg * s;
                    let mut dy = seg * c;
                    for &(lc, ls, ll) in &links[j..] {
                        dx -= ll * ls;
                        dy += ll * lc;
                    }
                    *col = [dx, dy];
                }
                out.push((p, jac));
            }
            base = [base[0] + len * c, base[1] + len * s];
            links.push((c, s, len));
        }
        out
    }
}

/// A planar pose: position in meters and orientation in radians, kept
/// wrapped to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub px: f64,
    pub py: f64,
    theta: f64,
}

impl Pose2 {
    pub fn new(px: f64, py: f64, theta: f64) -> Self {
        Self {
            px,
            py,
            theta: wrap_angle(theta),
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `(px, py, cos theta, sin theta)`, the encoding used for observations
    /// and dataset records.
    pub fn encode(&self) -> [f64; 4] {
        [self.px, self.py, self.theta.cos(), self.theta.sin()]
    }

    pub fn decode(e: [f64; 4]) -> Self {
        Self::new(e[0], e[1], e[3].atan2(e[2]))
    }
}

/// An axis-aligned ellipse `||(p - center) * inv_radii|| < 1` in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    inv_radii: [f64; 2],
}

impl Obstacle {
    pub fn new(center: [f64; 2], inv_radii: [f64; 2]) -> Result<Self> {
        if !(inv_radii.iter().all(|r| *r > 0.0 && r.is_finite())
            && center.iter().all(|c| c.is_finite()))
        {
            return Err(Error::config(
                "obstacle inverse radii must be positive and the center finite",
            ));
        }
        Ok(Self { center, inv_radii })
    }

    pub fn circle(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::config("obstacle radius must be positive"));
        }
        Self::new(center, [1.0 / radius, 1.0 / radius])
    }

    pub fn inv_radii(&self) -> [f64; 2] {
        self.inv_radii
    }

    /// Scaled distance of `p` minus one; negative inside the obstacle.
    pub fn point_margin(&self, p: [f64; 2]) -> f64 {
        let ex = (p[0] - self.center[0]) * self.inv_radii[0];
        let ey = (p[1] - self.center[1]) * self.inv_radii[1];
        ex.hypot(ey) - 1.0
    }

    /// Margin and its gradient with respect to `p`.
    pub(crate) fn point_margin_grad(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let ex = (p[0] - self.center[0]) * self.inv_radii[0];
        let ey = (p[1] - self.center[1]) * self.inv_radii[1];
        let norm = ex.hypot(ey);
        if norm == 0.0 {
            return (-1.0, [0.0, 0.0]);
        }
        (
            norm - 1.0,
            [ex * self.inv_radii[0] / norm, ey * self.inv_radii[1] / norm],
        )
    }

    /// Hessian of the margin with respect to `p`.
    pub(crate) fn point_margin_hessian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let s = self.inv_radii;
        let e = [
            (p[0] - self.center[0]) * s[0],
            (p[1] - self.center[1]) * s[1],
        ];
        let norm = e[0].hypot(e[1]);
        if norm == 0.0 {
            return [[0.0; 2]; 2];
        }
        let mut h = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                let eye = if r == c { 1.0 } else { 0.0 };
                h[r][c] = s[r] * s[c] * (eye / norm - e[r] * e[c] / norm.powi(3));
            }
        }
        h
    }
}

/// End-effector pose and the `n + 1` joint positions (base first).
pub fn forward_kinematics(model: &ArmModel, q: &[f64]) -> Result<(Pose2, Vec<[f64; 2]>)> {
    check_len("forward_kinematics q", model.dof(), q.len())?;
    let mut points = Vec::with_capacity(q.len() + 1);
    let mut p = [0.0, 0.0];
    let mut angle = 0.0;
    points.push(p);
    for (qi, len) in q.iter().zip(model.link_lengths()) {
        angle += qi;
        let (s, c) = angle.sin_cos();
        p = [p[0] + len * c, p[1] + len * s];
        points.push(p);
    }
    Ok((Pose2::new(p[0], p[1], angle), points))
}

/// End-effector pose without the intermediate points.
pub fn end_effector(model: &ArmModel, q: &[f64]) -> Result<Pose2> {
    forward_kinematics(model, q).map(|(ee, _)| ee)
}

/// `3 x n` Jacobian of `(px, py, theta)` with respect to the joint angles.
pub fn jacobian(model: &ArmModel, q: &[f64]) -> Result<DMatrix<f64>> {
    let n = model.dof();
    check_len("jacobian q", n, q.len())?;
    let mut jac = DMatrix::zeros(3, n);
    let mut angle = 0.0;
    let mut xs = Vec::with_capacity(n);
    for (qi, len) in q.iter().zip(model.link_lengths()) {
        angle += qi;
        xs.push((len * angle.cos(), len * angle.sin()));
    }
    // Column j is the sum of the perpendicular levers of links j..n.
    let mut sx = 0.0;
    let mut sy = 0.0;
    for j in (0..n).rev() {
        sx += xs[j].0;
        sy += xs[j].1;
        jac[(0, j)] = -sy;
        jac[(1, j)] = sx;
        jac[(2, j)] = 1.0;
    }
    Ok(jac)
}

/// Weighted output distance `w_p ||p - p_d||^2 + w_r wrap(theta - theta_d)^2`.
pub fn pose_distance(yd: &Pose2, y: &Pose2, w_p: f64, w_r: f64) -> f64 {
    let dx = y.px - yd.px;
    let dy = y.py - yd.py;
    let dth = wrap_angle(y.theta - yd.theta);
    w_p * (dx * dx + dy * dy) + w_r * dth * dth
}

/// Smallest scaled clearance of the arm's collision points to `obs`, minus
/// one. Negative values mean penetration.
pub fn obstacle_margin(model: &ArmModel, q: &[f64], obs: &Obstacle) -> Result<f64> {
    check_len("obstacle_margin q", model.dof(), q.len())?;
    Ok(model
        .collision_points(q)
        .iter()
        .map(|(p, _)| obs.point_margin(*p))
        .fold(f64::INFINITY, f64::min))
}

/// Smallest margin over several obstacles; `+inf` when there are none.
pub fn min_obstacle_margin(model: &ArmModel, q: &[f64], obstacles: &[Obstacle]) -> Result<f64> {
    let mut m = f64::INFINITY;
    for obs in obstacles {
        m = m.min(obstacle_margin(model, q, obs)?);
    }
    Ok(m)
}
