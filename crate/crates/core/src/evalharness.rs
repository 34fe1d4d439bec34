//! Closed-loop evaluation of the expert MPC, the diffusion policy and a
//! least-squares regression baseline on the simulated arm, with the tracking,
//! consistency, smoothness and safety metrics and their report files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{integrate, observation, sample_free_configuration, Dataset, NormStats};
use crate::diffusion::{gather, training_arrays, DenoiseConfig, DiffusionModel, PlanSample};
use crate::error::{check_len, Error, Result};
use crate::kinematics::{end_effector, min_obstacle_margin, wrap_angle, ArmModel, Pose2};
use crate::nlp::{
    expert_solve, mode_threshold, plan_distance, rollout, shift_plan, solve_multistart, stream_rng,
    warm_start_shift, OcpConfig, OcpSolution,
};
use crate::nn::{Activation, AdamState, ByteReader, Mlp, MlpSpec};
use crate::selection::{sample_batch, select, OcpContext, SelectionConfig, Strategy};

const LSM_MAGIC: &[u8; 8] = b"DAMPCLS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Control ticks per episode.
    pub episode_len: usize,
    /// Success thresholds on the terminal tracking error.
    pub pos_tol_mm: f64,
    pub rot_tol_deg: f64,
    /// Minimum obstacle margin of sampled start and target configurations.
    pub start_clearance: f64,
    /// Relative penetration depth up to which an episode counts as safe.
    pub penetration_tol: f64,
    /// Cells per side of the end-effector heatmap.
    pub heatmap_cells: usize,
    /// Random starts of the expert's first solve and restarts afterwards.
    pub mpc_starts: usize,
    /// Policies compared by a full evaluation.
    pub policies: Vec<Variant>,
    /// Policies compared by the ablation study.
    pub ablation: Vec<Variant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            episode_len: 80,
            pos_tol_mm: 20.0,
            rot_tol_deg: 5.7,
            start_clearance: 0.05,
            penetration_tol: 0.01,
            heatmap_cells: 200,
            mpc_starts: 8,
            policies: Variant::ALL.to_vec(),
            ablation: Variant::ABLATION.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_len == 0 {
            return Err(Error::config("episode_len must be at least 1"));
        }
        if !(self.pos_tol_mm > 0.0 && self.rot_tol_deg > 0.0) {
            return Err(Error::config("success thresholds must be positive"));
        }
        if !(self.penetration_tol >= 0.0) {
            return Err(Error::config("penetration_tol must be non-negative"));
        }
        if self.heatmap_cells == 0 {
            return Err(Error::config("heatmap_cells must be at least 1"));
        }
        if self.mpc_starts == 0 {
            return Err(Error::config("mpc_starts must be at least 1"));
        }
        Ok(())
    }
}

/// A controller evaluated in closed loop.
#[derive(Debug, Clone)]
pub enum Policy<'a> {
    /// The expert: a multi-start solve at the first tick, warm-started solves
    /// afterwards with `starts` random restarts when they do not converge.
    Mpc {
        starts: usize,
    },
    Diffusion {
        model: &'a DiffusionModel,
        denoise: DenoiseConfig,
        selection: SelectionConfig,
    },
    Lsm {
        model: &'a LsmModel,
    },
}

impl Policy<'_> {
    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::Mpc { starts } if *starts == 0 => {
                Err(Error::config("mpc needs at least one start"))
            }
            Policy::Mpc { .. } | Policy::Lsm { .. } => Ok(()),
            Policy::Diffusion {
                model,
                denoise,
                selection,
            } => {
                denoise.validate()?;
                selection.validate()?;
                check_len(
                    "denoise steps vs schedule",
                    model.schedule.n_steps(),
                    denoise.n_steps,
                )
            }
        }
    }
}

/// Named policy variants of the evaluation matrix. Diffusion variants take
/// the remaining sampling and selection settings from the configuration;
/// the `select-*` variants sample with guidance and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mpc,
    Lsm,
    Ddpm,
    DdpmGuided,
    DdpmEs,
    DdpmGuidedEs,
    Ddim,
    DdimGuided,
    SelectCost,
    SelectSafe,
    SelectCluster,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Mpc,
        Variant::Lsm,
        Variant::Ddpm,
        Variant::DdpmGuided,
        Variant::DdpmEs,
        Variant::DdpmGuidedEs,
        Variant::Ddim,
        Variant::DdimGuided,
        Variant::SelectCost,
        Variant::SelectSafe,
        Variant::SelectCluster,
    ];

    /// Guidance and early-stopping grid, then the selection strategies.
    pub const ABLATION: [Variant; 7] = [
        Variant::Ddpm,
        Variant::DdpmGuided,
        Variant::DdpmEs,
        Variant::DdpmGuidedEs,
        Variant::SelectCost,
        Variant::SelectSafe,
        Variant::SelectCluster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mpc => "mpc",
            Variant::Lsm => "lsm",
            Variant::Ddpm => "ddpm",
            Variant::DdpmGuided => "ddpm-guided",
            Variant::DdpmEs => "ddpm-es",
            Variant::DdpmGuidedEs => "ddpm-guided-es",
            Variant::Ddim => "ddim",
            Variant::DdimGuided => "ddim-guided",
            Variant::SelectCost => "select-cost",
            Variant::SelectSafe => "select-safe",
            Variant::SelectCluster => "select-cluster",
        }
    }

    pub fn needs_diffusion(self) -> bool {
        !matches!(self, Variant::Mpc | Variant::Lsm)
    }

    /// The policy of this variant. Fails when a needed model is missing.
    pub fn policy<'a>(
        self,
        cfg: &EvalConfig,
        diffusion: Option<&'a DiffusionModel>,
        lsm: Option<&'a LsmModel>,
        sampling: &DenoiseConfig,
        selection: &SelectionConfig,
    ) -> Result<Policy<'a>> {
        use crate::diffusion::Sampler;
        let (sampler, guided, es, strategy) = match self {
            Variant::Mpc => {
                return Ok(Policy::Mpc {
                    starts: cfg.mpc_starts,
                })
            }
            Variant::Lsm => {
                let model =
                    lsm.ok_or_else(|| Error::config("the lsm variant needs a regression model"))?;
                return Ok(Policy::Lsm { model });
            }
            Variant::Ddpm => (Sampler::Ddpm, false, false, Strategy::Naive),
            Variant::DdpmGuided => (Sampler::Ddpm, true, false, Strategy::Naive),
            Variant::DdpmEs => (Sampler::Ddpm, false, true, Strategy::Naive),
            Variant::DdpmGuidedEs => (Sampler::Ddpm, true, true, Strategy::Naive),
            Variant::Ddim => (Sampler::Ddim, false, false, Strategy::Naive),
            Variant::DdimGuided => (Sampler::Ddim, true, false, Strategy::Naive),
            Variant::SelectCost => (Sampler::Ddpm, true, true, Strategy::Cost),
            Variant::SelectSafe => (Sampler::Ddpm, true, true, Strategy::Safe),
            Variant::SelectCluster => (Sampler::Ddpm, true, true, Strategy::Cluster),
        };
        let model = diffusion.ok_or_else(|| {
            Error::config(format!(
                "the {} variant needs a diffusion model",
                self.name()
            ))
        })?;
        Ok(Policy::Diffusion {
            model,
            denoise: DenoiseConfig {
                sampler,
                guidance_enabled: guided,
                es_enabled: es,
                ..sampling.clone()
            },
            selection: SelectionConfig {
                strategy,
                ..selection.clone()
            },
        })
    }
}

/// Everything logged for one episode. `plans[t]` is the plan chosen at tick
/// `t`, `commands[t]` its clipped first command and `states[t + 1]` the
/// resulting state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub start: Vec<f64>,
    pub target: Pose2,
    pub states: Vec<Vec<f64>>,
    pub commands: Vec<Vec<f64>>,
    pub plans: Vec<Vec<f64>>,
    /// Wall clock of each policy call (s).
    pub step_seconds: Vec<f64>,
    /// Why the policy stopped early, if it did.
    pub failure: Option<String>,
}

/// Per-episode controller state.
struct Controller<'p, 'a> {
    policy: &'p Policy<'a>,
    rng: ChaCha8Rng,
    warm: Option<OcpSolution>,
    prev: Option<PlanSample>,
    denoise_seed: u64,
    multistart_seed: u64,
}

impl Controller<'_, '_> {
    fn plan(
        &mut self,
        ocp: &OcpConfig,
        arm: &ArmModel,
        x: &[f64],
        yd: &Pose2,
        tick: usize,
    ) -> Result<Vec<f64>> {
        match self.policy {
            Policy::Mpc { starts } => {
                let sol = match &self.warm {
                    None => first_solve(ocp, arm, x, yd, *starts, self.multistart_seed)?,
                    Some(prev) => {
                        let init = warm_start_shift(prev);
                        expert_solve(ocp, arm, x, yd, Some(&init), *starts, &mut self.rng)?
                    }
                };
                let plan = sol.xi.u.clone();
                self.warm = Some(sol);
                Ok(plan)
            }
            Policy::Diffusion {
                model,
                denoise,
                selection,
            } => {
                let cfg = DenoiseConfig {
                    rng_seed: self.denoise_seed,
                    ..denoise.clone()
                };
                let count = match selection.strategy {
                    Strategy::Naive => 1,
                    _ => selection.batch_size,
                };
                let obs = observation(x, yd);
                let mut batch = sample_batch(
                    model,
                    &cfg,
                    &obs,
                    self.prev.as_ref(),
                    arm.dof(),
                    count,
                    tick as u64,
                )?;
                if batch.is_empty() {
                    return Err(Error::NonFinite {
                        context: "every denoising chain".into(),
                    });
                }
                let ctx = OcpContext {
                    cfg: ocp,
                    model: arm,
                    x0: x,
                    yd,
                };
                let k = select(selection, &batch, &ctx, &mut self.rng)?;
                let chosen = batch.swap_remove(k);
                let plan = chosen.u_plan.clone();
                self.prev = Some(chosen);
                Ok(plan)
            }
            Policy::Lsm { model } => model.predict_plan(&observation(x, yd)),
        }
    }
}

/// Lowest-cost converged multi-start solution, else the least violating one.
fn first_solve(
    ocp: &OcpConfig,
    arm: &ArmModel,
    x: &[f64],
    yd: &Pose2,
    starts: usize,
    seed: u64,
) -> Result<OcpSolution> {
    let mut ms = solve_multistart(ocp, arm, x, yd, starts, seed)?;
    if let Some(k) = ms.solutions.iter().position(|s| s.converged) {
        return Ok(ms.solutions.swap_remove(k));
    }
    let best = ms
        .solutions
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.max_violation.total_cmp(&b.1.max_violation))
        .map(|(k, _)| k);
    match best {
        Some(k) => Ok(ms.solutions.swap_remove(k)),
        None => Err(ms
            .failures
            .pop()
            .map(|(_, e)| e)
            .unwrap_or_else(|| Error::config("multi-start produced no solution"))),
    }
}

/// Start configuration and target pose of `episode`, drawn as during data
/// collection; the generator is returned for the policy's own draws.
pub fn episode_setup(
    arm: &ArmModel,
    ocp: &OcpConfig,
    cfg: &EvalConfig,
    seed: u64,
    episode: usize,
) -> Result<(Vec<f64>, Pose2, ChaCha8Rng)> {
    let mut rng = stream_rng(seed, episode as u64);
    let start = sample_free_configuration(arm, &ocp.obstacles, cfg.start_clearance, &mut rng)?;
    let q_target = sample_free_configuration(arm, &ocp.obstacles, cfg.start_clearance, &mut rng)?;
    Ok((start, end_effector(arm, &q_target)?, rng))
}

fn clip_command(arm: &ArmModel, u: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(arm.vel_limit())
        .map(|(u, l)| u.clamp(-l, *l))
        .collect()
}

/// Runs one episode of `policy`.
pub fn run_episode(
    policy: &Policy,
    arm: &ArmModel,
    ocp: &OcpConfig,
    cfg: &EvalConfig,
    seed: u64,
    episode: usize,
) -> Result<EpisodeLog> {
    let (start, target, mut rng) = episode_setup(arm, ocp, cfg, seed, episode)?;
    let (denoise_seed, multistart_seed) = (rng.random(), rng.random());
    let mut ctl = Controller {
        policy,
        rng,
        warm: None,
        prev: None,
        denoise_seed,
        multistart_seed,
    };
    if let Policy::Diffusion {
        denoise, selection, ..
    } = policy
    {
        ctl.denoise_seed ^= denoise.rng_seed;
        ctl.rng = ChaCha8Rng::seed_from_u64(ctl.denoise_seed ^ selection.rng_seed);
    }
    let n = arm.dof();
    let mut log = EpisodeLog {
        episode,
        start: start.clone(),
        target,
        states: vec![start],
        commands: Vec::with_capacity(cfg.episode_len),
        plans: Vec::with_capacity(cfg.episode_len),
        step_seconds: Vec::with_capacity(cfg.episode_len),
        failure: None,
    };
    for tick in 0..cfg.episode_len {
        let x = log.states.last().unwrap().clone();
        let t0 = Instant::now();
        let plan = ctl.plan(ocp, arm, &x, &target, tick);
        let elapsed = t0.elapsed().as_secs_f64();
        let plan = match plan {
            Ok(p) if p.len() == ocp.horizon * n && p.iter().all(|v| v.is_finite()) => p,
            Ok(_) => {
                log.failure = Some(format!("tick {tick}: policy returned an invalid plan"));
                break;
            }
            Err(e) => {
                log.failure = Some(format!("tick {tick}: {e}"));
                break;
            }
        };
        let u = clip_command(arm, &plan[..n]);
        log.states.push(integrate(arm, &x, &u, ocp.dt));
        log.commands.push(u);
        log.plans.push(plan);
        log.step_seconds.push(elapsed);
    }
    if let Some(reason) = &log.failure {
        log::debug!("episode {episode}: {reason}");
    }
    Ok(log)
}

/// Runs `cfg.episodes` episodes in parallel. Episode `e` draws from stream
/// `e` of `seed`, so logs do not depend on the number of workers, and every
/// policy sees the same starts and targets.
pub fn run_closed_loop(
    policy: &Policy,
    arm: &ArmModel,
    ocp: &OcpConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    cfg.validate()?;
    ocp.validate(arm.dof())?;
    policy.validate()?;
    (0..cfg.episodes)
        .into_par_iter()
        .map(|e| run_episode(policy, arm, ocp, cfg, seed, e))
        .collect()
}

/// Position (m) and wrapped orientation (rad) error of state `q`.
pub fn tracking_error(arm: &ArmModel, q: &[f64], target: &Pose2) -> Result<(f64, f64)> {
    let y = end_effector(arm, q)?;
    let pos = ((y.px - target.px).powi(2) + (y.py - target.py).powi(2)).sqrt();
    Ok((pos, wrap_angle(y.theta() - target.theta()).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tracking {
    pub success: bool,
    /// Terminal errors (m, rad).
    pub pos_error: f64,
    pub rot_error: f64,
    /// First time from which both errors stay below the thresholds.
    pub reach_time: Option<f64>,
}

/// Success, terminal errors and time to reach of one episode. An episode the
/// policy aborted is never a success.
pub fn success_and_errors(
    arm: &ArmModel,
    log: &EpisodeLog,
    cfg: &EvalConfig,
    dt: f64,
) -> Result<Tracking> {
    let (pos_tol, rot_tol) = (cfg.pos_tol_mm * 1e-3, cfg.rot_tol_deg.to_radians());
    let errors = log
        .states
        .iter()
        .map(|q| tracking_error(arm, q, &log.target))
        .collect::<Result<Vec<_>>>()?;
    let within = |&(p, r): &(f64, f64)| p < pos_tol && r < rot_tol;
    let (pos_error, rot_error) = *errors.last().expect("states include the start");
    let mut first = errors.len();
    while first > 0 && within(&errors[first - 1]) {
        first -= 1;
    }
    let reach_time = (first < errors.len()).then(|| first as f64 * dt);
    Ok(Tracking {
        success: log.failure.is_none() && within(&(pos_error, rot_error)),
        pos_error,
        rot_error,
        reach_time,
    })
}

/// Number of ticks at which the plan jumped by more than `tau` from the
/// shifted previous plan, and that count per transition in percent.
pub fn mode_swaps(plans: &[Vec<f64>], dof: usize, tau: f64) -> (usize, f64) {
    if plans.len() < 2 {
        return (0, 0.0);
    }
    let swaps = plans
        .windows(2)
        .filter(|w| plan_distance(&w[1], &shift_plan(&w[0], dof)) > tau)
        .count();
    (swaps, 100.0 * swaps as f64 / (plans.len() - 1) as f64)
}

/// Norm of the second difference of the executed commands divided by dt².
pub fn jerk_norms(commands: &[Vec<f64>], dt: f64) -> Vec<f64> {
    commands
        .windows(3)
        .map(|w| {
            w[2].iter()
                .zip(&w[1])
                .zip(&w[0])
                .map(|((a, b), c)| (a - 2.0 * b + c).powi(2))
                .sum::<f64>()
                .sqrt()
                / (dt * dt)
        })
        .collect()
}

/// Deepest obstacle penetration over the episode relative to the obstacle
/// radius; zero without contact.
pub fn penetration_ratio(arm: &ArmModel, ocp: &OcpConfig, states: &[Vec<f64>]) -> Result<f64> {
    if ocp.obstacles.is_empty() {
        return Ok(0.0);
    }
    let mut worst = 0.0f64;
    for q in states {
        worst = worst.max(-min_obstacle_margin(arm, q, &ocp.obstacles)?);
    }
    Ok(worst)
}

/// Grid 0, 0.01, ..., 1 of relative penetration depths.
pub fn cdf_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 100.0).collect()
}

/// Fraction of `values` at or below each grid point.
pub fn empirical_cdf(values: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    grid.iter()
        .map(|g| {
            if sorted.is_empty() {
                0.0
            } else {
                sorted.partition_point(|v| v <= g) as f64 / sorted.len() as f64
            }
        })
        .collect()
}

/// Order-independent mean: values are summed in sorted order. NaN when empty.
pub fn mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Linearly interpolated quantile; NaN when empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Aggregate metrics of one policy. Times and errors are averaged over
/// successful episodes only; undefined aggregates are NaN.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub policy: String,
    pub episodes: usize,
    pub aborted: usize,
    pub success_rate_pct: f64,
    pub ate_mm: f64,
    pub are_deg: f64,
    pub trt_s: f64,
    pub mode_swap_pct: f64,
    /// Median over episodes of the per-episode median jerk.
    pub median_jerk: f64,
    /// Episodes whose relative penetration stays within the tolerance.
    pub constraint_sr_pct: f64,
    pub penetration_cdf: Vec<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "policy,episodes,aborted,success_rate_pct,ate_mm,are_deg,trt_s,\
                                          mode_swap_pct,median_jerk,constraint_sr_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.policy,
            self.episodes,
            self.aborted,
            self.success_rate_pct,
            self.ate_mm,
            self.are_deg,
            self.trt_s,
            self.mode_swap_pct,
            self.median_jerk,
            self.constraint_sr_pct
        )
    }
}

pub fn summarize(
    name: &str,
    logs: &[EpisodeLog],
    arm: &ArmModel,
    ocp: &OcpConfig,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let tau = mode_threshold(ocp.horizon, arm.dof());
    let (mut pos, mut rot, mut trt, mut swaps, mut jerks, mut pen) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut successes = 0;
    for log in logs {
        let t = success_and_errors(arm, log, cfg, ocp.dt)?;
        if t.success {
            successes += 1;
            pos.push(t.pos_error * 1e3);
            rot.push(t.rot_error.to_degrees());
            trt.extend(t.reach_time);
        }
        swaps.push(mode_swaps(&log.plans, arm.dof(), tau).1);
        let j = jerk_norms(&log.commands, ocp.dt);
        if !j.is_empty() {
            jerks.push(median(&j));
        }
        pen.push(penetration_ratio(arm, ocp, &log.states)?);
    }
    let pct = |k: usize| {
        if logs.is_empty() {
            f64::NAN
        } else {
            100.0 * k as f64 / logs.len() as f64
        }
    };
    let safe = pen.iter().filter(|&&p| p <= cfg.penetration_tol).count();
    Ok(MetricsReport {
        policy: name.to_string(),
        episodes: logs.len(),
        aborted: logs.iter().filter(|l| l.failure.is_some()).count(),
        success_rate_pct: pct(successes),
        ate_mm: mean(&pos),
        are_deg: mean(&rot),
        trt_s: mean(&trt),
        mode_swap_pct: mean(&swaps),
        median_jerk: median(&jerks),
        constraint_sr_pct: pct(safe),
        penetration_cdf: empirical_cdf(&pen, &cdf_grid()),
    })
}

/// Wall-clock statistics of the policy calls (ms).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub policy: String,
    pub ticks: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

pub fn timing(name: &str, logs: &[EpisodeLog]) -> TimingReport {
    let ms: Vec<f64> = logs
        .iter()
        .flat_map(|l| l.step_seconds.iter().map(|s| s * 1e3))
        .collect();
    TimingReport {
        policy: name.to_string(),
        ticks: ms.len(),
        mean_ms: mean(&ms),
        median_ms: median(&ms),
        p95_ms: quantile(&ms, 0.95),
    }
}

/// Mean and 10-90% band of the tracking errors at each tick.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBand {
    pub tick: usize,
    pub episodes: usize,
    pub pos_mean_mm: f64,
    pub pos_p10_mm: f64,
    pub pos_p90_mm: f64,
    pub rot_mean_deg: f64,
    pub rot_p10_deg: f64,
    pub rot_p90_deg: f64,
}

/// Error bands over the episodes still running at each tick.
pub fn error_bands(arm: &ArmModel, logs: &[EpisodeLog]) -> Result<Vec<ErrorBand>> {
    let ticks = logs.iter().map(|l| l.states.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(ticks);
    for t in 0..ticks {
        let (mut pos, mut rot) = (vec![], vec![]);
        for l in logs.iter().filter(|l| t < l.states.len()) {
            let (p, r) = tracking_error(arm, &l.states[t], &l.target)?;
            pos.push(p * 1e3);
            rot.push(r.to_degrees());
        }
        out.push(ErrorBand {
            tick: t,
            episodes: pos.len(),
            pos_mean_mm: mean(&pos),
            pos_p10_mm: quantile(&pos, 0.1),
            pos_p90_mm: quantile(&pos, 0.9),
            rot_mean_deg: mean(&rot),
            rot_p10_deg: quantile(&rot, 0.1),
            rot_p90_deg: quantile(&rot, 0.9),
        });
    }
    Ok(out)
}

/// Point counts on a square grid. Points outside the extent land in the
/// nearest edge cell, so the counts always sum to the number of points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub cells: usize,
    /// Lower-left corner and side length.
    pub origin: [f64; 2],
    pub side: f64,
    /// Row-major counts, `counts[iy * cells + ix]`.
    pub counts: Vec<u64>,
}

impl Heatmap {
    pub fn new(origin: [f64; 2], side: f64, cells: usize) -> Self {
        Self {
            cells,
            origin,
            side,
            counts: vec![0; cells * cells],
        }
    }

    /// Grid covering the reachable workspace of `arm`.
    pub fn for_arm(arm: &ArmModel, cells: usize) -> Self {
        let r = arm.reach() * 1.05;
        Self::new([-r, -r], 2.0 * r, cells)
    }

    fn index(&self, v: f64, origin: f64) -> usize {
        let k = ((v - origin) / self.side * self.cells as f64).floor();
        if k.is_nan() {
            0
        } else {
            k.clamp(0.0, (self.cells - 1) as f64) as usize
        }
    }

    pub fn add(&mut self, p: [f64; 2]) {
        let (ix, iy) = (
            self.index(p[0], self.origin[0]),
            self.index(p[1], self.origin[1]),
        );
        self.counts[iy * self.cells + ix] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let h = self.side / self.cells as f64;
        [
            self.origin[0] + (ix as f64 + 0.5) * h,
            self.origin[1] + (iy as f64 + 0.5) * h,
        ]
    }

    /// ln(1 + count) scaled so the fullest cell is 1.
    pub fn log_density(&self, count: u64) -> f64 {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        if max == 0 {
            0.0
        } else {
            (count as f64).ln_1p() / (max as f64).ln_1p()
        }
    }

    /// Non-empty cells as `(ix, iy, count)`, row-major.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(k, &c)| (k % self.cells, k / self.cells, c))
    }
}

/// End-effector positions along the rollouts of `plans` from `x0`,
/// including the start.
pub fn plan_end_effector_points(
    arm: &ArmModel,
    x0: &[f64],
    plans: &[Vec<f64>],
    dt: f64,
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for plan in plans {
        for q in rollout(x0, plan, dt)? {
            let y = end_effector(arm, &q)?;
            out.push([y.px, y.py]);
        }
    }
    Ok(out)
}

/// Closed-loop results of one named policy.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub name: String,
    pub logs: Vec<EpisodeLog>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains([',', '"', '\n', '\r', '<', '>', '&']) {
        return Err(Error::config(format!(
            "policy name {name:?} cannot be written to a report"
        )));
    }
    Ok(())
}

fn write(dir: &Path, file: &str, body: &str) -> Result<()> {
    let path = dir.join(file);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Writes the report files into `dir`:
///
/// - `metrics.csv`: one row per policy, deterministic for a fixed seed;
/// - `timing.csv`: wall clock per policy call;
/// - `error_vs_time.csv` / `.svg`: mean and 10-90% band of the errors;
/// - `penetration_cdf.csv` / `.svg`;
/// - `heatmap.csv` / `.svg`: visited end-effector positions.
///
/// Returns the metrics rows.
pub fn emit_report(
    dir: &Path,
    runs: &[PolicyRun],
    arm: &ArmModel,
    ocp: &OcpConfig,
    cfg: &EvalConfig,
) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    for r in runs {
        check_name(&r.name)?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let reports = runs
        .iter()
        .map(|r| summarize(&r.name, &r.logs, arm, ocp, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut metrics = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in &reports {
        writeln!(metrics, "{}", r.csv_row()).unwrap();
    }
    write(dir, "metrics.csv", &metrics)?;

    let mut csv = String::from("policy,ticks,mean_ms,median_ms,p95_ms\n");
    for r in runs {
        let t = timing(&r.name, &r.logs);
        writeln!(
            csv,
            "{},{},{},{},{}",
            t.policy, t.ticks, t.mean_ms, t.median_ms, t.p95_ms
        )
        .unwrap();
    }
    write(dir, "timing.csv", &csv)?;

    let mut csv = String::from(
        "policy,tick,time_s,episodes,pos_mean_mm,pos_p10_mm,pos_p90_mm,rot_mean_deg,rot_p10_deg,rot_p90_deg\n",
    );
    let mut bands = Vec::with_capacity(runs.len());
    for r in runs {
        let b = error_bands(arm, &r.logs)?;
        for e in &b {
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{}",
                r.name,
                e.tick,
                e.tick as f64 * ocp.dt,
                e.episodes,
                e.pos_mean_mm,
                e.pos_p10_mm,
                e.pos_p90_mm,
                e.rot_mean_deg,
                e.rot_p10_deg,
                e.rot_p90_deg
            )
            .unwrap();
        }
        bands.push((r.name.as_str(), b));
    }
    write(dir, "error_vs_time.csv", &csv)?;
    write(dir, "error_vs_time.svg", &svg::error_bands(&bands, ocp.dt))?;

    let grid = cdf_grid();
    let mut csv = String::from("policy,relative_depth,fraction\n");
    for r in &reports {
        for (g, f) in grid.iter().zip(&r.penetration_cdf) {
            writeln!(csv, "{},{},{}", r.policy, g, f).unwrap();
        }
    }
    write(dir, "penetration_cdf.csv", &csv)?;
    write(dir, "penetration_cdf.svg", &svg::cdfs(&reports, &grid))?;

    let mut maps = Vec::with_capacity(runs.len());
    for r in runs {
        let mut h = Heatmap::for_arm(arm, cfg.heatmap_cells);
        for l in &r.logs {
            for q in &l.states {
                let y = end_effector(arm, q)?;
                h.add([y.px, y.py]);
            }
        }
        maps.push((r.name.clone(), h));
    }
    write_heatmaps(dir, &maps)?;
    Ok(reports)
}

/// Writes `heatmap.csv` and `heatmap.svg`, one layer per named map.
pub fn write_heatmaps(dir: &Path, maps: &[(String, Heatmap)]) -> Result<()> {
    let mut csv = String::from("policy,ix,iy,x,y,count,log_density\n");
    for (name, h) in maps {
        check_name(name)?;
        for (ix, iy, c) in h.occupied() {
            let [x, y] = h.cell_center(ix, iy);
            writeln!(csv, "{name},{ix},{iy},{x},{y},{c},{}", h.log_density(c)).unwrap();
        }
    }
    write(dir, "heatmap.csv", &csv)?;
    write(dir, "heatmap.svg", &svg::heatmaps(maps))
}

mod svg {
    use super::{ErrorBand, Heatmap, MetricsReport};
    use std::fmt::Write as _;

    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];

    fn open(width: f64, height: f64) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
             viewBox=\"0 0 {width} {height}\">\n<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
        )
    }

    /// Maps data coordinates into one plot panel at vertical offset `top`.
    struct Axes {
        x_max: f64,
        y_max: f64,
        top: f64,
    }

    impl Axes {
        fn px(&self, x: f64) -> f64 {
            PAD + (W - 2.0 * PAD) * (x / self.x_max)
        }
        fn py(&self, y: f64) -> f64 {
            self.top + H - PAD - (H - 2.0 * PAD) * (y / self.y_max).clamp(0.0, 1.0)
        }
        fn frame(&self, out: &mut String, title: &str, x_label: &str) {
            let (x0, x1, y0, y1) = (PAD, W - PAD, self.top + H - PAD, self.top + PAD);
            writeln!(
                out,
                "<path d=\"M{x0} {y1} V{y0} H{x1}\" fill=\"none\" stroke=\"black\"/>\n\
                 <text x=\"{x0}\" y=\"{}\" font-size=\"12\">{title} (max {:.3})</text>\n\
                 <text x=\"{}\" y=\"{}\" font-size=\"11\">{x_label} (max {:.3})</text>",
                y1 - 8.0,
                self.y_max,
                x1 - 150.0,
                y0 + 28.0,
                self.x_max
            )
            .unwrap();
        }
    }

    fn polyline(points: &[(f64, f64)]) -> String {
        points
            .iter()
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn legend(out: &mut String, names: &[&str], top: f64) {
        for (k, name) in names.iter().enumerate() {
            writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{}\">{name}</text>",
                W - PAD - 100.0,
                top + PAD + 14.0 * (k as f64 + 1.0),
                COLORS[k % COLORS.len()]
            )
            .unwrap();
        }
    }

    fn finite_max(values: impl Iterator<Item = f64>) -> f64 {
        let m = values.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }

    pub(super) fn error_bands(runs: &[(&str, Vec<ErrorBand>)], dt: f64) -> String {
        let mut out = open(W, 2.0 * H);
        let t_max = finite_max(
            runs.iter()
                .flat_map(|(_, b)| b.iter().map(|e| e.tick as f64 * dt)),
        );
        type Pick = fn(&ErrorBand) -> (f64, f64, f64);
        let panels: [(&str, Pick); 2] = [
            ("position error [mm]", |e| {
                (e.pos_mean_mm, e.pos_p10_mm, e.pos_p90_mm)
            }),
            ("orientation error [deg]", |e| {
                (e.rot_mean_deg, e.rot_p10_deg, e.rot_p90_deg)
            }),
        ];
        for (p, (title, pick)) in panels.iter().enumerate() {
            let y_max = finite_max(runs.iter().flat_map(|(_, b)| b.iter().map(|e| pick(e).2)));
            let ax = Axes {
                x_max: t_max,
                y_max,
                top: p as f64 * H,
            };
            ax.frame(&mut out, title, "time [s]");
            for (k, (_, bands)) in runs.iter().enumerate() {
                let color = COLORS[k % COLORS.len()];
                let pts = |f: &dyn Fn(&ErrorBand) -> f64| -> Vec<(f64, f64)> {
                    bands
                        .iter()
                        .filter(|e| f(e).is_finite())
                        .map(|e| (ax.px(e.tick as f64 * dt), ax.py(f(e))))
                        .collect()
                };
                let mut band = pts(&|e| pick(e).2);
                band.extend(pts(&|e| pick(e).1).into_iter().rev());
                writeln!(
                    out,
                    "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n\
                     <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"/>",
                    polyline(&band),
                    polyline(&pts(&|e| pick(e).0))
                )
                .unwrap();
            }
            legend(
                &mut out,
                &runs.iter().map(|r| r.0).collect::<Vec<_>>(),
                ax.top,
            );
        }
        out.push_str("</svg>\n");
        out
    }

    pub(super) fn cdfs(reports: &[MetricsReport], grid: &[f64]) -> String {
        let mut out = open(W, H);
        let ax = Axes {
            x_max: 1.0,
            y_max: 1.0,
            top: 0.0,
        };
        ax.frame(&mut out, "fraction of episodes", "max depth / radius");
        for (k, r) in reports.iter().enumerate() {
            let pts: Vec<(f64, f64)> = grid
                .iter()
                .zip(&r.penetration_cdf)
                .map(|(g, f)| (ax.px(*g), ax.py(*f)))
                .collect();
            writeln!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\"/>",
                polyline(&pts),
                COLORS[k % COLORS.len()]
            )
            .unwrap();
        }
        legend(
            &mut out,
            &reports
                .iter()
                .map(|r| r.policy.as_str())
                .collect::<Vec<_>>(),
            0.0,
        );
        out.push_str("</svg>\n");
        out
    }

    pub(super) fn heatmaps(maps: &[(String, Heatmap)]) -> String {
        const SIDE: f64 = 300.0;
        let mut out = open(SIDE * maps.len().max(1) as f64, SIDE + 20.0);
        for (k, (name, h)) in maps.iter().enumerate() {
            let x0 = k as f64 * SIDE;
            let cell = SIDE / h.cells as f64;
            writeln!(
                out,
                "<text x=\"{}\" y=\"14\" font-size=\"12\">{name}</text>",
                x0 + 4.0
            )
            .unwrap();
            for (ix, iy, c) in h.occupied() {
                writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" \
                     fill=\"black\" fill-opacity=\"{:.3}\"/>",
                    x0 + ix as f64 * cell,
                    20.0 + (h.cells - 1 - iy) as f64 * cell,
                    h.log_density(c)
                )
                .unwrap();
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsmConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for LsmConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256; 4],
            activation: Activation::Gelu,
            steps: 20_000,
            batch_size: 256,
            lr: 1e-3,
            lr_final: 1e-4,
            seed: 0,
        }
    }
}

impl LsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("lsm batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return Err(Error::config("lsm learning rates must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Regression baseline: a network from the normalized observation to the
/// normalized plan.
#[derive(Debug, Clone)]
pub struct LsmModel {
    pub net: Mlp,
    pub stats: NormStats,
}

impl LsmModel {
    pub fn new(
        hidden: &[usize],
        activation: Activation,
        init_seed: u64,
        stats: NormStats,
    ) -> Result<Self> {
        let mut widths = vec![stats.obs_mean.len()];
        widths.extend_from_slice(hidden);
        widths.push(stats.plan_mean.len());
        Ok(Self {
            net: Mlp::new(MlpSpec::new(widths, activation, init_seed))?,
            stats,
        })
    }

    /// Denormalized plan for the raw observation `obs`.
    pub fn predict_plan(&self, obs: &[f64]) -> Result<Vec<f64>> {
        check_len("observation width", self.stats.obs_mean.len(), obs.len())?;
        let x = Array2::from_shape_vec((1, obs.len()), self.stats.normalize_obs(obs))
            .expect("row shape");
        let y = self.net.predict(x.view())?;
        Ok(self
            .stats
            .denormalize_plan(y.as_slice().expect("standard layout")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(LSM_MAGIC);
        let st = &self.stats;
        for d in [st.obs_mean.len(), st.plan_mean.len()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in [&st.obs_mean, &st.obs_std, &st.plan_mean, &st.plan_std] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        self.net.encode(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != LSM_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad regression checkpoint magic".into(),
            });
        }
        let (obs_dim, plan_dim) = (r.u32()? as usize, r.u32()? as usize);
        let mut read_vec = |n: usize| (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>();
        let stats = NormStats {
            obs_mean: read_vec(obs_dim)?,
            obs_std: read_vec(obs_dim)?,
            plan_mean: read_vec(plan_dim)?,
            plan_std: read_vec(plan_dim)?,
        };
        let at = r.pos;
        let net = Mlp::from_bytes(&bytes[at..]).map_err(|e| match e {
            Error::Format { offset, reason } => Error::Format {
                offset: offset + at as u64,
                reason,
            },
            other => other,
        })?;
        if net.spec().input_dim() != obs_dim || net.spec().output_dim() != plan_dim {
            return Err(Error::Format {
                offset: at as u64,
                reason: "network shape does not match the declared dimensions".into(),
            });
        }
        Ok(Self { net, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Fits the regression baseline by minibatch MSE in normalized plan space.
/// Returns the model and the per-step batch losses.
pub fn train_lsm(ds: &Dataset, cfg: &LsmConfig) -> Result<(LsmModel, Vec<f64>)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let (plans, obs) = training_arrays(ds);
    let mut model = LsmModel::new(&cfg.hidden, cfg.activation, cfg.seed, ds.stats.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.net, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..ds.len()))
            .collect();
        let (x, y) = (gather(&obs, &idx), gather(&plans, &idx));
        let (pred, cache) = model.net.forward(x.view())?;
        let err = pred - &y;
        let loss = err.mapv(|e| e * e).mean().unwrap();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "regression training loss".into(),
            });
        }
        let grads = model
            .net
            .backward(&cache, (err * (2.0 / y.len() as f64)).view())?;
        adam.lr = cfg.lr_at(step);
        adam.step(&mut model.net, &grads)?;
        losses.push(loss);
        if step % 1000 == 0 {
            log::debug!("lsm step {step}: loss {loss:.4}");
        }
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_with(states: Vec<Vec<f64>>, target: Pose2) -> EpisodeLog {
        EpisodeLog {
            episode: 0,
            start: states[0].clone(),
            target,
            commands: vec![],
            plans: vec![],
            step_seconds: vec![],
            failure: None,
            states,
        }
    }

    #[test]
    fn reach_time_needs_the_errors_to_stay_small() {
        let arm = ArmModel::desk();
        let q = vec![0.3, 0.2, -0.1];
        let target = end_effector(&arm, &q).unwrap();
        let far = vec![1.0, 0.2, -0.1];
        let cfg = EvalConfig::default();
        let log = log_with(
            vec![far.clone(), q.clone(), far.clone(), q.clone(), q.clone()],
            target,
        );
        let t = success_and_errors(&arm, &log, &cfg, 0.1).unwrap();
        assert!(t.success);
        assert_eq!(t.reach_time, Some(0.30000000000000004));
        assert_eq!(t.pos_error, 0.0);

        let log = log_with(vec![q.clone(), far], target);
        let t = success_and_errors(&arm, &log, &cfg, 0.1).unwrap();
        assert!(!t.success);
        assert_eq!(t.reach_time, None);
    }

    #[test]
    fn aborted_episodes_never_succeed() {
        let arm = ArmModel::desk();
        let q = vec![0.3, 0.2, -0.1];
        let mut log = log_with(vec![q.clone()], end_effector(&arm, &q).unwrap());
        log.failure = Some("tick 0: boom".into());
        assert!(
            !success_and_errors(&arm, &log, &EvalConfig::default(), 0.1)
                .unwrap()
                .success
        );
    }

    #[test]
    fn swaps_compare_against_the_shifted_plan() {
        let a = vec![1.0, 2.0, 3.0];
        let shifted = vec![2.0, 3.0, 3.0];
        let far = vec![-5.0, -5.0, -5.0];
        let (k, rate) = mode_swaps(&[a.clone(), shifted, far], 1, 1.0);
        assert_eq!(k, 1);
        assert_eq!(rate, 50.0);
        assert_eq!(mode_swaps(&[a], 1, 1.0), (0, 0.0));
    }

    #[test]
    fn jerk_of_a_quadratic_command_is_constant() {
        // u_t = t^2 has second difference 2.
        let commands: Vec<Vec<f64>> = (0..6).map(|t| vec![(t * t) as f64, 0.0]).collect();
        let j = jerk_norms(&commands, 0.5);
        assert_eq!(j, vec![8.0; 4]);
    }

    #[test]
    fn statistics_examples() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.1), 1.4);
        assert!(mean(&[]).is_nan());
        assert_eq!(
            empirical_cdf(&[0.0, 0.5, 0.5, 1.0], &[0.0, 0.49, 0.5, 1.0]),
            vec![0.25, 0.25, 0.75, 1.0]
        );
    }

    #[test]
    fn penetration_is_relative_to_the_radius() {
        use crate::kinematics::Obstacle;
        let arm = ArmModel::new(vec![1.0], vec![-3.0], vec![3.0], vec![1.0]).unwrap();
        // End effector at (1, 0); circle of radius 0.2 centred 0.05 beyond it.
        let ocp =
            OcpConfig::desk(1).with_obstacles(vec![Obstacle::circle([1.05, 0.0], 0.2).unwrap()]);
        let ratio = penetration_ratio(&arm, &ocp, &[vec![0.0]]).unwrap();
        assert!((ratio - 0.75).abs() < 1e-12, "{ratio}");
        assert_eq!(
            penetration_ratio(&arm, &ocp, &[vec![std::f64::consts::PI]]).unwrap(),
            0.0
        );
    }

    #[test]
    fn heatmap_keeps_every_point() {
        let mut h = Heatmap::new([0.0, 0.0], 1.0, 4);
        for p in [
            [0.1, 0.1],
            [0.9, 0.1],
            [5.0, -5.0],
            [f64::NAN, 0.5],
            [0.3, 0.8],
        ] {
            h.add(p);
        }
        assert_eq!(h.total(), 5);
        assert_eq!(h.counts[3], 2);
        assert_eq!(h.log_density(2), 1.0);
        assert_eq!(h.cell_center(0, 0), [0.125, 0.125]);
    }
}
