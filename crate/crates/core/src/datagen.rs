//! Imitation dataset: noisy-expert rollouts, filtering and the binary file
//! format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kinematics::{
    end_effector, min_obstacle_margin, pose_distance, ArmModel, Obstacle, Pose2,
};
use crate::nlp::{expert_solve, stream_rng, warm_start_shift, OcpConfig};

pub const MAGIC: &[u8; 6] = b"DAMPC\0";
pub const FORMAT_VERSION: u16 = 1;

/// Standard deviations below this are treated as this when normalizing, so
/// constant features do not divide by zero.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    /// Desired signal-to-noise ratio of the executed command.
    pub snr_d: f64,
    /// Minimum exploration noise std (rad/s).
    pub sigma_min: f64,
    pub episode_len: usize,
    pub dy_filter_threshold: f64,
    /// Position and orientation weights of the output distance stored with
    /// every record and compared against `dy_filter_threshold`.
    pub dy_w_p: f64,
    pub dy_w_r: f64,
    /// Random initial guesses tried when a solve does not converge.
    pub init_attempts: usize,
    /// Minimum obstacle margin of sampled start and target configurations.
    pub start_clearance: f64,
    /// Episodes per collection run.
    pub episodes: usize,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            snr_d: 0.8,
            sigma_min: 0.35,
            episode_len: 80,
            dy_filter_threshold: 0.01,
            dy_w_p: 1.0,
            dy_w_r: 1.0,
            init_attempts: 8,
            start_clearance: 0.05,
            episodes: 1000,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_d > 0.0) {
            return Err(Error::config("snr_d must be positive"));
        }
        if !(self.sigma_min >= 0.0) {
            return Err(Error::config("sigma_min must be non-negative"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode_len must be at least 1"));
        }
        if !(self.dy_filter_threshold > 0.0) {
            return Err(Error::config("dy_filter_threshold must be positive"));
        }
        if !(self.dy_w_p >= 0.0 && self.dy_w_r >= 0.0) {
            return Err(Error::config("dy weights must be non-negative"));
        }
        if self.init_attempts == 0 {
            return Err(Error::config("init_attempts must be at least 1"));
        }
        if !(self.start_clearance >= 0.0) {
            return Err(Error::config("start_clearance must be non-negative"));
        }
        Ok(())
    }
}

/// Per-joint exploration std `max(|u_j| / snr_d, sigma_min)`.
pub fn noise_std(u: &[f64], cfg: &ExplorationConfig) -> Vec<f64> {
    u.iter()
        .map(|v| (v.abs() / cfg.snr_d).max(cfg.sigma_min))
        .collect()
}

/// The executed exploration command: the expert's first input plus
/// per-joint Gaussian noise, clipped to the velocity box.
pub fn noisy_expert_command<R: Rng + ?Sized>(
    u_first: &[f64],
    cfg: &ExplorationConfig,
    model: &ArmModel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_len("expert command", model.dof(), u_first.len())?;
    Ok(u_first
        .iter()
        .zip(noise_std(u_first, cfg))
        .zip(model.vel_limit())
        .map(|((u, sd), lim)| {
            let eps: f64 = rng.sample(StandardNormal);
            (u + sd * eps).clamp(-lim, *lim)
        })
        .collect())
}

/// Euler step of the plant. The joint box acts as a hard stop.
pub fn integrate(model: &ArmModel, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
    x.iter()
        .zip(u)
        .enumerate()
        .map(|(j, (x, u))| (x + dt * u).clamp(model.joint_lo()[j], model.joint_hi()[j]))
        .collect()
}

/// Uniform configuration in the joint box with at least `clearance` obstacle
/// margin.
pub fn sample_free_configuration<R: Rng + ?Sized>(
    model: &ArmModel,
    obstacles: &[Obstacle],
    clearance: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    const MAX_TRIES: usize = 10_000;
    for _ in 0..MAX_TRIES {
        let q: Vec<f64> = model
            .joint_lo()
            .iter()
            .zip(model.joint_hi())
            .map(|(lo, hi)| rng.random_range(*lo..=*hi))
            .collect();
        if min_obstacle_margin(model, &q, obstacles)? >= clearance {
            return Ok(q);
        }
    }
    Err(Error::config(
        "no collision-free configuration found; obstacles cover the workspace",
    ))
}

/// One stored (state, target, optimal plan) tuple. Values are stored at
/// single precision, as in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub x_t: Vec<f32>,
    /// `(px, py, cos theta, sin theta)`.
    pub y_d: [f32; 4],
    /// Row-major `N x n`.
    pub u_star: Vec<f32>,
    pub dy_terminal: f32,
    pub episode_id: u32,
    pub step_id: u32,
    pub seed: u64,
}

impl EpisodeRecord {
    /// Conditioning vector `[x_t, y_d]`.
    pub fn observation(&self) -> Vec<f64> {
        self.x_t
            .iter()
            .chain(&self.y_d)
            .map(|&v| f64::from(v))
            .collect()
    }

    pub fn plan(&self) -> Vec<f64> {
        self.u_star.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Conditioning vector for a state and target.
pub fn observation(x: &[f64], yd: &Pose2) -> Vec<f64> {
    let mut obs = x.to_vec();
    obs.extend_from_slice(&yd.encode());
    obs
}

/// Per-feature mean and population std of observations and plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub plan_mean: Vec<f64>,
    pub plan_std: Vec<f64>,
}

fn mean_std(rows: impl Iterator<Item = Vec<f64>> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    for row in rows.clone() {
        count += 1;
        for (m, v) in mean.iter_mut().zip(&row) {
            *m += v;
        }
    }
    if count == 0 {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(&row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / count as f64).sqrt()).collect();
    (mean, std)
}

impl NormStats {
    /// Zero mean and unit std; the statistics of an empty dataset.
    pub fn identity(obs_dim: usize, plan_dim: usize) -> Self {
        Self {
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
            plan_mean: vec![0.0; plan_dim],
            plan_std: vec![1.0; plan_dim],
        }
    }

    pub fn compute(records: &[EpisodeRecord], obs_dim: usize, plan_dim: usize) -> Self {
        let (obs_mean, obs_std) = mean_std(records.iter().map(EpisodeRecord::observation), obs_dim);
        let (plan_mean, plan_std) = mean_std(records.iter().map(EpisodeRecord::plan), plan_dim);
        Self {
            obs_mean,
            obs_std,
            plan_mean,
            plan_std,
        }
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f64> {
        standardize(obs, &self.obs_mean, &self.obs_std)
    }

    pub fn normalize_plan(&self, plan: &[f64]) -> Vec<f64> {
        standardize(plan, &self.plan_mean, &self.plan_std)
    }

    pub fn denormalize_plan(&self, plan: &[f64]) -> Vec<f64> {
        plan.iter()
            .zip(&self.plan_mean)
            .zip(&self.plan_std)
            .map(|((v, m), s)| v * s.max(STD_FLOOR) + m)
            .collect()
    }
}

fn standardize(v: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    v.iter()
        .zip(mean)
        .zip(std)
        .map(|((v, m), s)| (v - m) / s.max(STD_FLOOR))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Joints.
    pub n: usize,
    pub horizon: usize,
    pub stats: NormStats,
    pub records: Vec<EpisodeRecord>,
}

impl Dataset {
    /// Builds a dataset and computes its normalization statistics.
    pub fn new(n: usize, horizon: usize, records: Vec<EpisodeRecord>) -> Result<Self> {
        for r in &records {
            check_len("record x_t", n, r.x_t.len())?;
            check_len("record u_star", n * horizon, r.u_star.len())?;
        }
        let stats = NormStats::compute(&records, n + 4, n * horizon);
        Ok(Self {
            n,
            horizon,
            stats,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.n + 4
    }

    pub fn plan_dim(&self) -> usize {
        self.n * self.horizon
    }

    fn record_size(&self) -> usize {
        4 * (self.n + 4 + self.plan_dim() + 1) + 4 + 4 + 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.records.len() * self.record_size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.horizon as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let s = &self.stats;
        for v in s
            .obs_mean
            .iter()
            .chain(&s.obs_std)
            .chain(&s.plan_mean)
            .chain(&s.plan_std)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            for v in r.x_t.iter().chain(&r.y_d).chain(&r.u_star) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&r.dy_terminal.to_le_bytes());
            out.extend_from_slice(&r.episode_id.to_le_bytes());
            out.extend_from_slice(&r.step_id.to_le_bytes());
            out.extend_from_slice(&r.seed.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let at = r.pos as u64;
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: at,
                reason: format!("unsupported version {version}"),
            });
        }
        let n = r.u32("n")? as usize;
        let horizon = r.u32("N")? as usize;
        let count = r.u64("record count")?;
        if n == 0 || horizon == 0 {
            return Err(Error::Format {
                offset: MAGIC.len() as u64 + 2,
                reason: "zero dimension".into(),
            });
        }
        let (obs_dim, plan_dim) = (n + 4, n * horizon);
        let stats = NormStats {
            obs_mean: r.f64s(obs_dim, "obs_mean")?,
            obs_std: r.f64s(obs_dim, "obs_std")?,
            plan_mean: r.f64s(plan_dim, "plan_mean")?,
            plan_std: r.f64s(plan_dim, "plan_std")?,
        };
        let record_size = 4 * (obs_dim + plan_dim + 1) + 16;
        let remaining = (bytes.len() - r.pos) as u64;
        if remaining != count.saturating_mul(record_size as u64) {
            return Err(Error::Format {
                offset: r.pos as u64 + (remaining / record_size as u64) * record_size as u64,
                reason: format!(
                    "header announces {count} records of {record_size} bytes, found {remaining} bytes"
                ),
            });
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let x_t = r.f32s(n, "x_t")?;
            let y = r.f32s(4, "y_d")?;
            records.push(EpisodeRecord {
                x_t,
                y_d: [y[0], y[1], y[2], y[3]],
                u_star: r.f32s(plan_dim, "u_star")?,
                dy_terminal: r.f32s(1, "dy_terminal")?[0],
                episode_id: r.u32("episode_id")?,
                step_id: r.u32("step_id")?,
                seed: r.u64("seed")?,
            });
        }
        Ok(Self {
            n,
            horizon,
            stats,
            records,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f32s(&mut self, len: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&ds.to_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Drops records whose virtual terminal output misses the target by more
/// than `threshold` and recomputes the statistics.
pub fn filter_dataset(ds: &Dataset, threshold: f64) -> Dataset {
    let records: Vec<EpisodeRecord> = ds
        .records
        .iter()
        .filter(|r| f64::from(r.dy_terminal) <= threshold)
        .cloned()
        .collect();
    Dataset::new(ds.n, ds.horizon, records).expect("records already validated")
}

/// One simulated episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub records: Vec<EpisodeRecord>,
    /// The expert failed to converge and the episode stopped early.
    pub truncated: bool,
    pub start: Vec<f64>,
    pub target: Pose2,
}

/// Runs the noisy expert for one episode. Everything random is drawn from
/// stream `episode_id` of `seed`.
pub fn collect_episode(
    cfg: &ExplorationConfig,
    ocp: &OcpConfig,
    model: &ArmModel,
    seed: u64,
    episode_id: u32,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    ocp.validate(model.dof())?;
    let mut rng = stream_rng(seed, u64::from(episode_id));
    let start = sample_free_configuration(model, &ocp.obstacles, cfg.start_clearance, &mut rng)?;
    let q_target = sample_free_configuration(model, &ocp.obstacles, cfg.start_clearance, &mut rng)?;
    let target = end_effector(model, &q_target)?;
    let y_enc = target.encode().map(|v| v as f32);

    let mut records = Vec::with_capacity(cfg.episode_len);
    let mut x = start.clone();
    let mut warm = None;
    let mut truncated = false;
    for step in 0..cfg.episode_len {
        let sol = match expert_solve(
            ocp,
            model,
            &x,
            &target,
            warm.as_ref(),
            cfg.init_attempts,
            &mut rng,
        ) {
            Ok(sol) if sol.converged => sol,
            Ok(_) | Err(Error::Diverged { .. }) => {
                log::debug!("episode {episode_id}: expert failed at step {step}");
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let ys = end_effector(model, &sol.x_s_pred[ocp.horizon])?;
        records.push(EpisodeRecord {
            x_t: x.iter().map(|&v| v as f32).collect(),
            y_d: y_enc,
            u_star: sol.xi.u.iter().map(|&v| v as f32).collect(),
            dy_terminal: pose_distance(&target, &ys, cfg.dy_w_p, cfg.dy_w_r) as f32,
            episode_id,
            step_id: step as u32,
            seed,
        });
        let u = noisy_expert_command(&sol.xi.u[..model.dof()], cfg, model, &mut rng)?;
        x = integrate(model, &x, &u, ocp.dt);
        warm = Some(warm_start_shift(&sol));
    }
    Ok(EpisodeOutcome {
        records,
        truncated,
        start,
        target,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectionReport {
    pub episodes: usize,
    pub truncated_episodes: usize,
    pub records: usize,
}

/// Collects `episodes` episodes in parallel. Records are merged in episode
/// order, so the result does not depend on the number of workers.
pub fn collect_dataset(
    cfg: &ExplorationConfig,
    ocp: &OcpConfig,
    model: &ArmModel,
    episodes: usize,
    seed: u64,
) -> Result<(Dataset, CollectionReport)> {
    let outcomes: Vec<Result<EpisodeOutcome>> = (0..episodes as u32)
        .into_par_iter()
        .map(|id| collect_episode(cfg, ocp, model, seed, id))
        .collect();
    let mut report = CollectionReport {
        episodes,
        ..Default::default()
    };
    let mut records = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        report.truncated_episodes += usize::from(outcome.truncated);
        records.extend(outcome.records);
    }
    report.records = records.len();
    Ok((Dataset::new(model.dof(), ocp.horizon, records)?, report))
}
