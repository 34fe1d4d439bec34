//! Batch sampling from the diffusion prior and post-hoc choice of one plan:
//! first sample, lowest surrogate cost, uniform among collision-free, or
//! medoid of the densest cluster.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_chains, DenoiseConfig, DiffusionModel, PlanSample};
use crate::error::{check_len, Error, Result};
use crate::kinematics::{end_effector, min_obstacle_margin, pose_distance, ArmModel, Pose2};
use crate::nlp::{mode_threshold, plan_distance, rollout, OcpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Cost,
    Safe,
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub batch_size: usize,
    pub strategy: Strategy,
    /// Plan-space radius for leader clustering; `None` uses the mode
    /// threshold of the OCP.
    pub cluster_radius: Option<f64>,
    /// Violation up to which a sample counts as feasible when ranking.
    pub feasibility_tol: f64,
    pub rng_seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            strategy: Strategy::Naive,
            cluster_radius: None,
            feasibility_tol: 1e-6,
            rng_seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("selection batch_size must be at least 1"));
        }
        if let Some(r) = self.cluster_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config("cluster_radius must be positive"));
            }
        }
        if !(self.feasibility_tol >= 0.0) {
            return Err(Error::config("feasibility_tol must be non-negative"));
        }
        Ok(())
    }

    pub fn radius(&self, ocp: &OcpConfig, dof: usize) -> f64 {
        self.cluster_radius
            .unwrap_or_else(|| mode_threshold(ocp.horizon, dof))
    }
}

/// The OCP data needed to judge a plan.
#[derive(Debug, Clone, Copy)]
pub struct OcpContext<'a> {
    pub cfg: &'a OcpConfig,
    pub model: &'a ArmModel,
    pub x0: &'a [f64],
    pub yd: &'a Pose2,
}

/// Draws `count` chains and drops (with a warning) any that went non-finite.
pub fn sample_batch(
    model: &DiffusionModel,
    cfg: &DenoiseConfig,
    obs: &[f64],
    prev: Option<&PlanSample>,
    dof: usize,
    count: usize,
    stream: u64,
) -> Result<Vec<PlanSample>> {
    if count == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut out = Vec::with_capacity(count);
    for (k, r) in sample_chains(model, cfg, obs, prev, dof, count, stream)?
        .into_iter()
        .enumerate()
    {
        match r {
            Ok(p) => out.push(p),
            Err(step) => log::warn!(
                "dropping chain {k} of tick {stream}: non-finite at denoising step {step}"
            ),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub cost: f64,
    pub max_violation: f64,
}

/// Surrogate MPC cost of a plan: the virtual input is the zero plan, so the
/// virtual state stays at `x0`, and the output distance is taken at the
/// plan's own terminal state.
pub fn surrogate_cost(ctx: &OcpContext, plan: &[f64]) -> Result<f64> {
    let (cfg, model) = (ctx.cfg, ctx.model);
    let n = model.dof();
    check_len("plan length", cfg.horizon * n, plan.len())?;
    let xs = rollout(ctx.x0, plan, cfg.dt)?;
    let sq = |a: &[f64], b: &[f64], w: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(w)
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum()
    };
    let zero = vec![0.0; n];
    let mut cost = sq(&xs[cfg.horizon], ctx.x0, &cfg.p_weights);
    cost += pose_distance(
        ctx.yd,
        &end_effector(model, &xs[cfg.horizon])?,
        cfg.w_p,
        cfg.w_r,
    );
    for k in 0..cfg.horizon {
        cost += sq(&xs[k], ctx.x0, &cfg.q_weights);
        cost += sq(&plan[k * n..(k + 1) * n], &zero, &cfg.r_weights);
    }
    Ok(cost)
}

/// Largest positive constraint residual of the plan's rollout: joint box and
/// obstacles for k = 1..N, velocity box for k = 0..N-1.
pub fn plan_violation(ctx: &OcpContext, plan: &[f64]) -> Result<f64> {
    let (cfg, model) = (ctx.cfg, ctx.model);
    let n = model.dof();
    check_len("plan length", cfg.horizon * n, plan.len())?;
    let xs = rollout(ctx.x0, plan, cfg.dt)?;
    let mut worst: f64 = 0.0;
    for (k, u) in plan.chunks_exact(n).enumerate() {
        for j in 0..n {
            worst = worst.max(u[j].abs() - model.vel_limit()[j]);
            let x = xs[k + 1][j];
            worst = worst
                .max(x - model.joint_hi()[j])
                .max(model.joint_lo()[j] - x);
        }
    }
    Ok(worst.max(collision_depth(ctx, plan)?))
}

/// Deepest obstacle penetration `max(0, -margin)` over the rollout states
/// k = 1..N.
pub fn collision_depth(ctx: &OcpContext, plan: &[f64]) -> Result<f64> {
    if ctx.cfg.obstacles.is_empty() {
        return Ok(0.0);
    }
    let xs = rollout(ctx.x0, plan, ctx.cfg.dt)?;
    let mut worst: f64 = 0.0;
    for x in &xs[1..] {
        worst = worst.max(-min_obstacle_margin(ctx.model, x, &ctx.cfg.obstacles)?);
    }
    Ok(worst)
}

pub fn score(ctx: &OcpContext, plan: &[f64]) -> Result<Score> {
    Ok(Score {
        cost: surrogate_cost(ctx, plan)?,
        max_violation: plan_violation(ctx, plan)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clustering {
    /// Cluster id of every sample; ids are in order of first appearance.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Sample index of each cluster's leader.
    pub leaders: Vec<usize>,
}

/// Samples with their scores, in ranked order for cost ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSamples {
    pub samples: Vec<PlanSample>,
    pub scores: Vec<Score>,
    /// Batch index of each entry.
    pub indices: Vec<usize>,
    pub clusters: Option<Clustering>,
}

/// Orders the batch feasible-first, then by cost, then by batch index.
pub fn rank_by_cost(batch: &[PlanSample], ctx: &OcpContext, tol: f64) -> Result<RankedSamples> {
    let scores: Vec<Score> = batch
        .par_iter()
        .map(|p| score(ctx, &p.u_plan))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scores[a].max_violation > tol;
        let fb = scores[b].max_violation > tol;
        fa.cmp(&fb)
            .then(scores[a].cost.total_cmp(&scores[b].cost))
            .then(a.cmp(&b))
    });
    Ok(RankedSamples {
        samples: order.iter().map(|&i| batch[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        indices: order,
        clusters: None,
    })
}

/// Uniform pick among collision-free samples; if there are none, the one
/// with the smallest penetration (lowest index on ties). Returns the batch
/// index.
pub fn select_safe<R: Rng + ?Sized>(
    batch: &[PlanSample],
    ctx: &OcpContext,
    rng: &mut R,
) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::config("cannot select from an empty batch"));
    }
    let depth: Vec<f64> = batch
        .par_iter()
        .map(|p| collision_depth(ctx, &p.u_plan))
        .collect::<Result<_>>()?;
    let safe: Vec<usize> = (0..batch.len()).filter(|&i| depth[i] <= 0.0).collect();
    if safe.is_empty() {
        let best = (0..batch.len())
            .min_by(|&a, &b| depth[a].total_cmp(&depth[b]).then(a.cmp(&b)))
            .unwrap();
        return Ok(best);
    }
    Ok(safe[rng.random_range(0..safe.len())])
}

/// Single-pass leader clustering in sample order: a sample joins the first
/// leader within `radius`, otherwise it leads a new cluster.
pub fn leader_clusters(plans: &[&[f64]], radius: f64) -> Clustering {
    let mut leaders: Vec<usize> = Vec::new();
    let mut sizes = Vec::new();
    let mut assignment = Vec::with_capacity(plans.len());
    for (i, p) in plans.iter().enumerate() {
        match leaders
            .iter()
            .position(|&l| plan_distance(plans[l], p) <= radius)
        {
            Some(c) => {
                assignment.push(c);
                sizes[c] += 1;
            }
            None => {
                assignment.push(leaders.len());
                leaders.push(i);
                sizes.push(1);
            }
        }
    }
    Clustering {
        assignment,
        sizes,
        leaders,
    }
}

/// Medoid of the largest cluster (ties: earliest leader; medoid ties: lowest
/// index). Returns the batch index and the clustering.
pub fn cluster_select(batch: &[PlanSample], radius: f64) -> Result<(usize, Clustering)> {
    if batch.is_empty() {
        return Err(Error::config("cannot select from an empty batch"));
    }
    let plans: Vec<&[f64]> = batch.iter().map(|p| p.u_plan.as_slice()).collect();
    let clusters = leader_clusters(&plans, radius);
    let mut best = 0;
    for c in 1..clusters.sizes.len() {
        if clusters.sizes[c] > clusters.sizes[best] {
            best = c;
        }
    }
    let members: Vec<usize> = (0..batch.len())
        .filter(|&i| clusters.assignment[i] == best)
        .collect();
    let total = |i: usize| -> f64 {
        members
            .iter()
            .map(|&j| plan_distance(plans[i], plans[j]))
            .sum()
    };
    let medoid = members
        .iter()
        .map(|&i| (i, total(i)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .unwrap()
        .0;
    Ok((medoid, clusters))
}

/// Picks one sample from `batch` by `cfg.strategy`. Returns its batch index.
pub fn select<R: Rng + ?Sized>(
    cfg: &SelectionConfig,
    batch: &[PlanSample],
    ctx: &OcpContext,
    rng: &mut R,
) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::config("cannot select from an empty batch"));
    }
    match cfg.strategy {
        Strategy::Naive => Ok(0),
        Strategy::Cost => Ok(rank_by_cost(batch, ctx, cfg.feasibility_tol)?.indices[0]),
        Strategy::Safe => select_safe(batch, ctx, rng),
        Strategy::Cluster => Ok(cluster_select(batch, cfg.radius(ctx.cfg, ctx.model.dof()))?.0),
    }
}
