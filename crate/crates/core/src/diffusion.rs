//! DDPM prior over normalized action plans: the noise schedule, the
//! x0-prediction training loss and the DDPM/DDIM samplers with guidance
//! toward the previous plan and early-stopped noise injection.
//!
//! Step indices follow the usual convention: `i = 0` is clean data and
//! `i = N_I` is pure noise. `alpha_bar(0) = 1`.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, NormStats};
use crate::error::{check_len, Error, Result};
use crate::nlp::shift_plan;
use crate::nn::{Activation, AdamState, ByteReader, Gradients, Mlp, MlpSpec};

const MAGIC: &[u8; 8] = b"DAMPCDF1";
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
/// Min-SNR loss weighting `min(max(snr, floor), gamma)`. The floor keeps
/// the zero-SNR step in the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinSnr {
    pub gamma: f64,
    pub floor: f64,
}

impl Default for MinSnr {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            floor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    // Index 0 is the clean end: beta 0, alpha 1, alpha_bar 1.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule rescaled to zero terminal SNR.
    pub fn cosine(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::config(
                "the diffusion schedule needs at least one step",
            ));
        }
        let n = n_steps as f64;
        let f = |i: usize| {
            let t = (i as f64 / n + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut ab = 1.0;
        let mut sqrt_ab = Vec::with_capacity(n_steps);
        for i in 1..=n_steps {
            let beta = (1.0 - f(i) / f(i - 1)).min(MAX_BETA);
            ab *= 1.0 - beta;
            sqrt_ab.push(ab.sqrt());
        }
        let first = sqrt_ab[0];
        let last = sqrt_ab[n_steps - 1];
        let scale = first / (first - last);
        let mut betas = Vec::with_capacity(n_steps);
        let mut prev = 1.0;
        for (k, s) in sqrt_ab.iter().enumerate() {
            let rescaled = if k == n_steps - 1 {
                0.0
            } else {
                (s - last) * scale
            };
            let ab = rescaled * rescaled;
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Self::from_betas(&betas)
    }

    /// Schedule from `beta_1..beta_N`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config(
                "the diffusion schedule needs at least one step",
            ));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
            return Err(Error::config("schedule betas must lie in (0, 1]"));
        }
        let mut beta = vec![0.0];
        let mut alpha = vec![1.0];
        let mut alpha_bar = vec![1.0];
        for &b in betas {
            beta.push(b);
            alpha.push(1.0 - b);
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.beta[i]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alpha[i]
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bar[i]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn snr(&self, i: usize) -> f64 {
        self.alpha_bar[i] / (1.0 - self.alpha_bar[i])
    }

    /// Loss weight of step `i` for the x0 objective.
    pub fn loss_weight(&self, i: usize, w: MinSnr) -> f64 {
        self.snr(i).max(w.floor).min(w.gamma)
    }

    /// Variance of the DDPM posterior `q(x_{i-1} | x_i, x_0)`.
    pub fn posterior_variance(&self, i: usize) -> f64 {
        (1.0 - self.alpha_bar[i - 1]) / (1.0 - self.alpha_bar[i]) * self.beta[i]
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.n_steps() {
            return Err(Error::config(format!(
                "diffusion step {i} outside 1..={}",
                self.n_steps()
            )));
        }
        Ok(())
    }
}

/// `sqrt(ab_i) x0 + sqrt(1 - ab_i) eps`.
pub fn q_sample(
    s: &NoiseSchedule,
    x0: &Array2<f64>,
    i: usize,
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    s.check_step(i)?;
    let ab = s.alpha_bar(i);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

pub fn x0_to_eps(
    s: &NoiseSchedule,
    x_i: &Array2<f64>,
    x0_hat: &Array2<f64>,
    i: usize,
) -> Result<Array2<f64>> {
    s.check_step(i)?;
    let ab = s.alpha_bar(i);
    Ok((x_i - &(x0_hat * ab.sqrt())) / (1.0 - ab).sqrt())
}

/// Inverse of [`x0_to_eps`]; undefined at the pure-noise step.
pub fn eps_to_x0(
    s: &NoiseSchedule,
    x_i: &Array2<f64>,
    eps_hat: &Array2<f64>,
    i: usize,
) -> Result<Array2<f64>> {
    s.check_step(i)?;
    if i == s.n_steps() {
        return Err(Error::Undefined("eps_to_x0 at the zero-SNR step"));
    }
    let ab = s.alpha_bar(i);
    Ok((x_i - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt())
}

/// `eps_hat + lambda (x_i - prev_x0) / (1 - ab_i)`.
pub fn guided_eps(
    s: &NoiseSchedule,
    scale: f64,
    eps_hat: &Array2<f64>,
    x_i: &Array2<f64>,
    prev_x0: &Array2<f64>,
    i: usize,
) -> Result<Array2<f64>> {
    s.check_step(i)?;
    if scale == 0.0 {
        return Ok(eps_hat.clone());
    }
    let k = scale / (1.0 - s.alpha_bar(i));
    Ok(eps_hat + &((x_i - prev_x0) * k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

/// Mean of the Gaussian that guidance pulls `x_i` toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceCenter {
    /// The previous clean plan itself.
    Plan,
    /// `sqrt(alpha_bar_i)` times the previous plan: the mean of `q(x_i | x0 = prev)`.
    ForwardMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub n_steps: usize,
    pub sampler: Sampler,
    pub guidance_enabled: bool,
    pub guidance_scale: f64,
    /// Guide toward the previous plan shifted by one control step.
    pub guidance_shift: bool,
    pub guidance_center: GuidanceCenter,
    pub es_enabled: bool,
    /// Noise is injected only at steps `i > i_min_es` when ES is enabled.
    pub i_min_es: usize,
    pub rng_seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            n_steps: 5,
            sampler: Sampler::Ddpm,
            guidance_enabled: false,
            guidance_scale: 1.0,
            guidance_shift: false,
            guidance_center: GuidanceCenter::ForwardMean,
            es_enabled: false,
            i_min_es: 3,
            rng_seed: 0,
        }
    }
}

impl DenoiseConfig {
    /// `floor(0.75 n_steps)`.
    pub fn default_i_min_es(n_steps: usize) -> usize {
        3 * n_steps / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("denoise n_steps must be positive"));
        }
        if self.i_min_es > self.n_steps {
            return Err(Error::config("i_min_es must not exceed n_steps"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config(
                "guidance_scale must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Standard deviation of the injected noise at step `i`.
    pub fn noise_std(&self, s: &NoiseSchedule, i: usize) -> f64 {
        if self.es_enabled && i <= self.i_min_es {
            0.0
        } else {
            s.posterior_variance(i).sqrt()
        }
    }
}

/// One DDPM posterior step. Row `r` draws its noise from `rngs[r]`.
pub fn ddpm_step(
    s: &NoiseSchedule,
    cfg: &DenoiseConfig,
    x_i: &Array2<f64>,
    x0_hat: &Array2<f64>,
    i: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<Array2<f64>> {
    s.check_step(i)?;
    check_len("ddpm rng count", x_i.nrows(), rngs.len())?;
    let denom = 1.0 - s.alpha_bar(i);
    let c0 = s.alpha_bar(i - 1).sqrt() * s.beta(i) / denom;
    let ci = s.alpha(i).sqrt() * (1.0 - s.alpha_bar(i - 1)) / denom;
    let mut out = x0_hat * c0 + &(x_i * ci);
    let sigma = cfg.noise_std(s, i);
    if sigma > 0.0 {
        for (mut row, rng) in out.rows_mut().into_iter().zip(rngs.iter_mut()) {
            row.iter_mut()
                .for_each(|v| *v += sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(out)
}

/// Deterministic DDIM step; at the pure-noise step the noise estimate is
/// `x_i` itself.
pub fn ddim_step(
    s: &NoiseSchedule,
    x_i: &Array2<f64>,
    x0_hat: &Array2<f64>,
    i: usize,
) -> Result<Array2<f64>> {
    let eps = x0_to_eps(s, x_i, x0_hat, i)?;
    let prev = s.alpha_bar(i - 1);
    Ok(x0_hat * prev.sqrt() + &(eps * (1.0 - prev).sqrt()))
}

/// Sinusoidal embedding of the step index with log-spaced frequencies.
pub fn time_embedding(i: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out[k] = (i as f64 * freq).sin();
        out[half + k] = (i as f64 * freq).cos();
    }
    out
}

/// Dimensions of the denoiser input `[x_i, time embedding, observation]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserDims {
    pub plan_dim: usize,
    pub obs_dim: usize,
    pub time_dim: usize,
}

impl DenoiserDims {
    pub fn input_dim(&self) -> usize {
        self.plan_dim + self.time_dim + self.obs_dim
    }
}

/// Network, schedule and normalization statistics: everything needed to
/// sample plans.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub dims: DenoiserDims,
    pub net: Mlp,
    pub stats: NormStats,
}

impl DiffusionModel {
    /// Fresh model; `hidden` lists the hidden widths.
    pub fn new(
        schedule: NoiseSchedule,
        dims: DenoiserDims,
        hidden: &[usize],
        activation: Activation,
        init_seed: u64,
        stats: NormStats,
    ) -> Result<Self> {
        if dims.time_dim % 2 != 0 {
            return Err(Error::config("time embedding width must be even"));
        }
        check_len("diffusion plan stats", dims.plan_dim, stats.plan_mean.len())?;
        check_len("diffusion obs stats", dims.obs_dim, stats.obs_mean.len())?;
        let mut widths = vec![dims.input_dim()];
        widths.extend_from_slice(hidden);
        widths.push(dims.plan_dim);
        let net = Mlp::new(MlpSpec::new(widths, activation, init_seed))?;
        Ok(Self {
            schedule,
            dims,
            net,
            stats,
        })
    }

    /// Network input rows for `x_i` at steps `steps` with normalized
    /// observations `obs` (one row per item, or one row shared by all).
    ///
    /// `x_i` enters scaled by `sqrt(alpha_bar_i)`, its linear least-squares
    /// estimate of a unit-variance `x0`. At the zero-SNR step the input is
    /// then exactly zero instead of pure noise the network must learn to
    /// ignore.
    pub fn assemble(
        &self,
        x_i: &Array2<f64>,
        steps: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let d = self.dims;
        let rows = x_i.nrows();
        check_len("diffusion x_i width", d.plan_dim, x_i.ncols())?;
        check_len("diffusion step count", rows, steps.len())?;
        check_len("diffusion obs width", d.obs_dim, obs.ncols())?;
        if obs.nrows() != rows && obs.nrows() != 1 {
            return Err(Error::Dimension {
                context: "diffusion obs rows",
                expected: rows,
                actual: obs.nrows(),
            });
        }
        let mut input = Array2::zeros((rows, d.input_dim()));
        input.slice_mut(s![.., ..d.plan_dim]).assign(x_i);
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for (r, &i) in steps.iter().enumerate() {
            if cached.as_ref().map_or(true, |(c, _)| *c != i) {
                cached = Some((i, time_embedding(i, d.time_dim)));
            }
            let emb = &cached.as_ref().unwrap().1;
            self.schedule.check_step(i)?;
            input
                .slice_mut(s![r, ..d.plan_dim])
                .mapv_inplace(|v| v * self.schedule.alpha_bar(i).sqrt());
            for (k, v) in emb.iter().enumerate() {
                input[[r, d.plan_dim + k]] = *v;
            }
            let o = obs.row(if obs.nrows() == 1 { 0 } else { r });
            input.slice_mut(s![r, d.plan_dim + d.time_dim..]).assign(&o);
        }
        Ok(input)
    }

    pub fn predict_x0(
        &self,
        x_i: &Array2<f64>,
        i: usize,
        obs: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let input = self.assemble(x_i, &vec![i; x_i.nrows()], obs)?;
        self.net.predict(input.view())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.schedule.n_steps() as u32).to_le_bytes());
        for b in self.schedule.betas() {
            out.extend_from_slice(&b.to_le_bytes());
        }
        for d in [self.dims.plan_dim, self.dims.obs_dim, self.dims.time_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let st = &self.stats;
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
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad diffusion checkpoint magic".into(),
            });
        }
        let at = r.pos;
        let steps = r.u32()? as usize;
        if steps == 0 || steps > 10_000 {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("implausible step count {steps}"),
            });
        }
        let at = r.pos;
        let betas = (0..steps).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let schedule = NoiseSchedule::from_betas(&betas).map_err(|e| Error::Format {
            offset: at as u64,
            reason: e.to_string(),
        })?;
        let dims = DenoiserDims {
            plan_dim: r.u32()? as usize,
            obs_dim: r.u32()? as usize,
            time_dim: r.u32()? as usize,
        };
        let mut read_vec = |n: usize| (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>();
        let stats = NormStats {
            obs_mean: read_vec(dims.obs_dim)?,
            obs_std: read_vec(dims.obs_dim)?,
            plan_mean: read_vec(dims.plan_dim)?,
            plan_std: read_vec(dims.plan_dim)?,
        };
        let at = r.pos;
        let net = Mlp::from_bytes(&bytes[at..]).map_err(|e| match e {
            Error::Format { offset, reason } => Error::Format {
                offset: offset + at as u64,
                reason,
            },
            other => other,
        })?;
        let spec = net.spec();
        if spec.input_dim() != dims.input_dim() || spec.output_dim() != dims.plan_dim {
            return Err(Error::Format {
                offset: at as u64,
                reason: "network shape does not match the declared dimensions".into(),
            });
        }
        Ok(Self {
            schedule,
            dims,
            net,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Batch-mean Min-SNR weighted x0 loss and its gradient with respect to
/// `x0_hat`.
pub fn weighted_x0_loss(
    s: &NoiseSchedule,
    weighting: MinSnr,
    x0: &Array2<f64>,
    x0_hat: &Array2<f64>,
    steps: &[usize],
) -> (f64, Array2<f64>) {
    let b = x0.nrows() as f64;
    let mut diff = x0_hat - x0;
    let mut loss = 0.0;
    for (mut row, &i) in diff.rows_mut().into_iter().zip(steps) {
        let w = s.loss_weight(i, weighting);
        loss += w * row.iter().map(|v| v * v).sum::<f64>();
        row *= 2.0 * w / b;
    }
    (loss / b, diff)
}

/// Loss and parameter gradients on one batch of normalized plans and
/// observations. Steps and noise are drawn from `rng`.
pub fn training_loss(
    model: &DiffusionModel,
    weighting: MinSnr,
    x0: &Array2<f64>,
    obs: ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    if x0.nrows() == 0 {
        return Err(Error::config("training batch is empty"));
    }
    let n = model.schedule.n_steps();
    let steps: Vec<usize> = (0..x0.nrows()).map(|_| rng.random_range(1..=n)).collect();
    let eps = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample(StandardNormal));
    let mut x_i = x0.clone();
    for (r, &i) in steps.iter().enumerate() {
        let ab = model.schedule.alpha_bar(i);
        let mut row = x_i.row_mut(r);
        row *= ab.sqrt();
        row.scaled_add((1.0 - ab).sqrt(), &eps.row(r));
    }
    let input = model.assemble(&x_i, &steps, obs)?;
    let (x0_hat, cache) = model.net.forward(input.view())?;
    let (loss, grad) = weighted_x0_loss(&model.schedule, weighting, x0, &x0_hat, &steps);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "diffusion training loss".into(),
        });
    }
    Ok((loss, model.net.backward(&cache, grad.view())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step; cosine decay from `lr`.
    pub lr_final: f64,
    pub min_snr_gamma: f64,
    pub snr_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            lr: 1e-3,
            lr_final: 1e-4,
            min_snr_gamma: 5.0,
            snr_floor: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0
            && self.lr_final > 0.0
            && self.min_snr_gamma > 0.0
            && self.snr_floor > 0.0)
        {
            return Err(Error::config(
                "lr, lr_final, min_snr_gamma and snr_floor must be positive",
            ));
        }
        Ok(())
    }

    pub fn weighting(&self) -> MinSnr {
        MinSnr {
            gamma: self.min_snr_gamma,
            floor: self.snr_floor,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Gathers rows `idx` of `m`.
pub(crate) fn gather(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Normalized plans and observations of every record, one row each, under
/// the dataset's statistics.
pub fn training_arrays(ds: &Dataset) -> (Array2<f64>, Array2<f64>) {
    let (pd, od) = (ds.plan_dim(), ds.obs_dim());
    let mut plans = Array2::zeros((ds.len(), pd));
    let mut obs = Array2::zeros((ds.len(), od));
    for (k, r) in ds.records.iter().enumerate() {
        let p = ds.stats.normalize_plan(&r.plan());
        let o = ds.stats.normalize_obs(&r.observation());
        plans.row_mut(k).iter_mut().zip(p).for_each(|(d, v)| *d = v);
        obs.row_mut(k).iter_mut().zip(o).for_each(|(d, v)| *d = v);
    }
    (plans, obs)
}

/// Trains on normalized `plans` and `obs` (matching rows). Returns the
/// per-step batch losses.
pub fn train(
    model: &mut DiffusionModel,
    plans: &Array2<f64>,
    obs: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_len("training plan width", model.dims.plan_dim, plans.ncols())?;
    check_len("training obs rows", plans.nrows(), obs.nrows())?;
    if plans.nrows() == 0 {
        return Err(Error::config("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.net, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..plans.nrows()))
            .collect();
        let x0 = gather(plans, &idx);
        let o = gather(obs, &idx);
        let (loss, grads) = training_loss(model, cfg.weighting(), &x0, o.view(), &mut rng)?;
        adam.lr = cfg.lr_at(step);
        adam.step(&mut model.net, &grads)?;
        losses.push(loss);
        if step % 1000 == 0 {
            log::debug!("diffusion step {step}: loss {loss:.4}");
        }
    }
    Ok(losses)
}

/// Architecture, training and sampling settings of the diffusion policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub n_steps: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_dim: usize,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub sampling: DenoiseConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            n_steps: 5,
            hidden: vec![256; 5],
            activation: Activation::Gelu,
            time_dim: 64,
            init_seed: 0,
            train: TrainConfig::default(),
            sampling: DenoiseConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampling.validate()?;
        check_len(
            "sampling steps vs n_steps",
            self.n_steps,
            self.sampling.n_steps,
        )
    }

    /// Untrained model sized for `ds`, normalized by its statistics.
    pub fn build(&self, ds: &Dataset) -> Result<DiffusionModel> {
        self.validate()?;
        let dims = DenoiserDims {
            plan_dim: ds.plan_dim(),
            obs_dim: ds.obs_dim(),
            time_dim: self.time_dim,
        };
        DiffusionModel::new(
            NoiseSchedule::cosine(self.n_steps)?,
            dims,
            &self.hidden,
            self.activation,
            self.init_seed,
            ds.stats.clone(),
        )
    }
}

/// Builds and trains a model on `ds`. Returns it with the per-step losses.
pub fn train_diffusion(ds: &Dataset, cfg: &DiffusionConfig) -> Result<(DiffusionModel, Vec<f64>)> {
    let mut model = cfg.build(ds)?;
    let (plans, obs) = training_arrays(ds);
    let losses = train(&mut model, &plans, &obs, &cfg.train)?;
    Ok((model, losses))
}

/// Generator for chain `chain` of control tick `stream` under `seed`.
pub fn chain_rng(seed: u64, stream: u64, chain: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(b"denoise\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(chain);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSample {
    /// Denormalized plan, `N x n` flattened row-major.
    pub u_plan: Vec<f64>,
    /// Clean sample in model space, kept for guidance at the next tick.
    pub x0_normalized: Vec<f64>,
}

fn mark_non_finite(a: &Array2<f64>, i: usize, failed: &mut [Option<usize>]) {
    for (row, f) in a.rows().into_iter().zip(failed.iter_mut()) {
        if f.is_none() && !row.iter().all(|v| v.is_finite()) {
            *f = Some(i);
        }
    }
}

/// Output of [`denoise`]: the clean samples and, per chain, the first step at
/// which it went non-finite.
#[derive(Debug, Clone)]
pub struct Denoised {
    pub x0: Array2<f64>,
    pub failed_at: Vec<Option<usize>>,
}

/// Runs the reverse chain from `x_n` in model space. `prev` is the
/// normalized guidance target, one row shared by all chains. Chains are
/// independent rows, so a chain that goes non-finite does not affect the
/// others.
pub fn denoise(
    model: &DiffusionModel,
    cfg: &DenoiseConfig,
    obs_norm: ArrayView2<f64>,
    prev: Option<&Array2<f64>>,
    x_n: Array2<f64>,
    rngs: &mut [ChaCha8Rng],
) -> Result<Denoised> {
    cfg.validate()?;
    let s = &model.schedule;
    check_len("denoise steps vs schedule", s.n_steps(), cfg.n_steps)?;
    let prev = if cfg.guidance_enabled { prev } else { None };
    let prev_rows = prev.map(|p| {
        if p.nrows() == 1 {
            p.broadcast(x_n.raw_dim()).unwrap().to_owned()
        } else {
            p.clone()
        }
    });
    let mut failed_at = vec![None; x_n.nrows()];
    let mut x = x_n;
    for i in (1..=s.n_steps()).rev() {
        let mut x0_hat = model.predict_x0(&x, i, obs_norm)?;
        // At the zero-SNR step x0 cannot be recovered from a noise estimate.
        if let (Some(p), true) = (&prev_rows, i < s.n_steps()) {
            let eps = x0_to_eps(s, &x, &x0_hat, i)?;
            let eps = match cfg.guidance_center {
                GuidanceCenter::Plan => guided_eps(s, cfg.guidance_scale, &eps, &x, p, i)?,
                GuidanceCenter::ForwardMean => guided_eps(
                    s,
                    cfg.guidance_scale,
                    &eps,
                    &x,
                    &(p * s.alpha_bar(i).sqrt()),
                    i,
                )?,
            };
            x0_hat = eps_to_x0(s, &x, &eps, i)?;
        }
        mark_non_finite(&x0_hat, i, &mut failed_at);
        x = match cfg.sampler {
            Sampler::Ddpm => ddpm_step(s, cfg, &x, &x0_hat, i, rngs)?,
            Sampler::Ddim => ddim_step(s, &x, &x0_hat, i)?,
        };
        mark_non_finite(&x, i, &mut failed_at);
    }
    Ok(Denoised { x0: x, failed_at })
}

/// Per-chain results of a batch: a sample, or the step at which the chain
/// went non-finite.
pub type ChainResult = std::result::Result<PlanSample, usize>;

/// Like [`sample_plans`] but reports failed chains instead of failing.
pub fn sample_chains(
    model: &DiffusionModel,
    cfg: &DenoiseConfig,
    obs: &[f64],
    prev: Option<&PlanSample>,
    dof: usize,
    count: usize,
    stream: u64,
) -> Result<Vec<ChainResult>> {
    check_len("observation width", model.dims.obs_dim, obs.len())?;
    let obs_norm =
        Array2::from_shape_vec((1, obs.len()), model.stats.normalize_obs(obs)).expect("row shape");
    let prev_norm = match prev {
        Some(p) if cfg.guidance_enabled => {
            check_len(
                "guidance plan width",
                model.dims.plan_dim,
                p.x0_normalized.len(),
            )?;
            let v = if cfg.guidance_shift {
                let raw = model.stats.denormalize_plan(&p.x0_normalized);
                model.stats.normalize_plan(&shift_plan(&raw, dof))
            } else {
                p.x0_normalized.clone()
            };
            Some(Array2::from_shape_vec((1, v.len()), v).expect("row shape"))
        }
        _ => None,
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..count as u64)
        .map(|k| chain_rng(cfg.rng_seed, stream, k))
        .collect();
    let mut x_n = Array2::zeros((count, model.dims.plan_dim));
    for (mut row, rng) in x_n.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    let out = denoise(
        model,
        cfg,
        obs_norm.view(),
        prev_norm.as_ref(),
        x_n,
        &mut rngs,
    )?;
    Ok(out
        .x0
        .rows()
        .into_iter()
        .zip(out.failed_at)
        .map(|(row, failed)| match failed {
            Some(i) => Err(i),
            None => {
                let x0_normalized = row.to_vec();
                Ok(PlanSample {
                    u_plan: model.stats.denormalize_plan(&x0_normalized),
                    x0_normalized,
                })
            }
        })
        .collect())
}

/// Draws `count` plans for the raw observation `obs`; fails if any chain
/// goes non-finite. Chains use [`chain_rng`]`(cfg.rng_seed, stream, k)`.
/// With guidance enabled, `prev` is the previous tick's sample.
pub fn sample_plans(
    model: &DiffusionModel,
    cfg: &DenoiseConfig,
    obs: &[f64],
    prev: Option<&PlanSample>,
    dof: usize,
    count: usize,
    stream: u64,
) -> Result<Vec<PlanSample>> {
    sample_chains(model, cfg, obs, prev, dof, count, stream)?
        .into_iter()
        .map(|r| {
            r.map_err(|i| Error::NonFinite {
                context: format!("denoising step {i}"),
            })
        })
        .collect()
}

pub fn sample_plan(
    model: &DiffusionModel,
    cfg: &DenoiseConfig,
    obs: &[f64],
    prev: Option<&PlanSample>,
    dof: usize,
    stream: u64,
) -> Result<PlanSample> {
    Ok(sample_plans(model, cfg, obs, prev, dof, 1, stream)?.remove(0))
}
