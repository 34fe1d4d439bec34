//! Feed-forward networks with hand-written backpropagation and Adam.
//!
//! Layers compute `x W + b` on row-major batches, so a batch of inputs is an
//! `(batch, width)` matrix. Hidden layers apply the activation; the output
//! layer is linear.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

const MAGIC: &[u8; 8] = b"DAMPCNN1";

// Every mutation of any network takes a fresh value, so a cache can never
// match parameters it was not computed from.
static VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Gelu => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, init_seed: u64) -> Self {
        Self {
            layer_widths,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config(
                "an MLP needs at least an input and an output width",
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config("MLP layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Network parameters. Weights are stored `(fan_in, fan_out)`.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    version: u64,
}

/// Intermediate values of a forward pass, enough for exact gradients.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    // Input to each layer.
    inputs: Vec<Array2<f64>>,
    // Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Multiplies the parameter gradients by `s`.
    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }
}

fn flatten(weights: &[Array2<f64>], biases: &[Array1<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in weights.iter().zip(biases) {
        out.extend(w.iter());
        out.extend(b.iter());
    }
    out
}

impl Mlp {
    /// He-style uniform initialization from `spec.init_seed`, zero biases.
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.layer_widths.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((w[0], w[1]), || {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::zeros(w[1]));
        }
        Ok(Self {
            spec,
            weights,
            biases,
            version: next_version(),
        })
    }

    /// A network with every weight and bias zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let mut mlp = Self::new(spec)?;
        mlp.weights.iter_mut().for_each(|w| w.fill(0.0));
        Ok(mlp)
    }

    /// Builds a network from explicit parameters.
    pub fn from_parts(
        spec: MlpSpec,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_widths.len() - 1;
        check_len("mlp weight count", layers, weights.len())?;
        check_len("mlp bias count", layers, biases.len())?;
        for (l, w) in spec.layer_widths.windows(2).enumerate() {
            check_len("mlp weight rows", w[0], weights[l].nrows())?;
            check_len("mlp weight columns", w[1], weights[l].ncols())?;
            check_len("mlp bias length", w[1], biases[l].len())?;
        }
        let mlp = Self {
            spec,
            weights,
            biases,
            version: next_version(),
        };
        if !mlp.is_finite() {
            return Err(Error::NonFinite {
                context: "mlp parameters".into(),
            });
        }
        Ok(mlp)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len(
            "mlp flat parameters",
            self.spec.parameter_count(),
            flat.len(),
        )?;
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut()
                .chain(b.iter_mut())
                .for_each(|v| *v = *it.next().unwrap());
        }
        self.version = next_version();
        Ok(())
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        check_len("mlp input width", self.spec.input_dim(), input.ncols())
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let last = self.weights.len() - 1;
        let mut h = input.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l < last {
                let act = self.spec.activation;
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input)?;
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = input.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.dot(w) + b;
            inputs.push(h);
            if l < last {
                let act = self.spec.activation;
                h = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
        }
        let cache = ForwardCache {
            version: self.version,
            inputs,
            pre,
        };
        Ok((h, cache))
    }

    /// Reverse-mode gradients of `sum(output * output_grad)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                params: self.version,
                cache: cache.version,
            });
        }
        let batch = cache.inputs[0].nrows();
        check_len("mlp output grad rows", batch, output_grad.nrows())?;
        check_len(
            "mlp output grad width",
            self.spec.output_dim(),
            output_grad.ncols(),
        )?;
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut delta = output_grad.to_owned();
        for l in (0..layers).rev() {
            gw[l] = cache.inputs[l].t().dot(&delta);
            gb[l] = delta.sum_axis(Axis(0));
            let mut back = delta.dot(&self.weights[l].t());
            if l > 0 {
                let act = self.spec.activation;
                Zip::from(&mut back)
                    .and(&cache.pre[l - 1])
                    .for_each(|g, &z| *g *= act.derivative(z));
            }
            delta = back;
        }
        Ok(Gradients {
            weights: gw,
            biases: gb,
            input: delta,
        })
    }

    /// Appends the checkpoint encoding to `out`.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(self.spec.activation.code());
        out.extend_from_slice(&self.spec.init_seed.to_le_bytes());
        out.extend_from_slice(&(self.spec.layer_widths.len() as u32).to_le_bytes());
        for &w in &self.spec.layer_widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for v in self.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Decodes a network from the front of `bytes`; returns it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad network magic".into(),
            });
        }
        let act_at = r.pos;
        let activation = Activation::from_code(r.take(1)?[0]).ok_or_else(|| Error::Format {
            offset: act_at as u64,
            reason: "unknown activation".into(),
        })?;
        let init_seed = r.u64()?;
        let layers_at = r.pos;
        let layers = r.u32()? as usize;
        if !(2..=1024).contains(&layers) {
            return Err(Error::Format {
                offset: layers_at as u64,
                reason: format!("implausible layer count {layers}"),
            });
        }
        let mut widths = Vec::with_capacity(layers);
        for _ in 0..layers {
            widths.push(r.u32()? as usize);
        }
        let spec = MlpSpec::new(widths, activation, init_seed);
        spec.validate().map_err(|e| Error::Format {
            offset: layers_at as u64,
            reason: e.to_string(),
        })?;
        let count = spec.parameter_count();
        let data_at = r.pos;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format {
            offset: data_at as u64,
            reason: "parameter count overflows".into(),
        })?)?;
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut mlp = Self::zeros(spec)?;
        mlp.set_flat(&flat)?;
        if !mlp.is_finite() {
            return Err(Error::Format {
                offset: data_at as u64,
                reason: "non-finite parameter".into(),
            });
        }
        Ok((mlp, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mlp, used) = Self::decode(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format {
                offset: used as u64,
                reason: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok(mlp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!(
                    "truncated: need {n} bytes, have {}",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        let zw: Vec<Array2<f64>> = mlp
            .weights
            .iter()
            .map(|w| Array2::zeros(w.raw_dim()))
            .collect();
        let zb: Vec<Array1<f64>> = mlp
            .biases
            .iter()
            .map(|b| Array1::zeros(b.raw_dim()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_w: zw.clone(),
            v_w: zw,
            m_b: zb.clone(),
            v_b: zb,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `mlp`.
    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<()> {
        check_len("adam layer count", mlp.weights.len(), grads.weights.len())?;
        for (l, (gw, gb)) in grads.weights.iter().zip(&grads.biases).enumerate() {
            if gw.dim() != mlp.weights[l].dim() {
                return Err(Error::Dimension {
                    context: "adam weight gradient",
                    expected: mlp.weights[l].len(),
                    actual: gw.len(),
                });
            }
            check_len("adam bias gradient", mlp.biases[l].len(), gb.len())?;
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                context: "adam gradients".into(),
            });
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..mlp.weights.len() {
            Zip::from(&mut mlp.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .for_each(update);
            Zip::from(&mut mlp.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .for_each(update);
        }
        mlp.version = next_version();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Step for the central differences.
pub const FD_STEP: f64 = 1e-6;
/// Below this magnitude the error is measured absolutely.
pub const FD_FLOOR: f64 = 1e-3;

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Compares `backward` against central differences of `sum(f(x) * g)` for
/// random parameters, inputs and `g`, over every parameter and input entry.
pub fn grad_check_instance(spec: &MlpSpec, batch: usize, seed: u64) -> Result<f64> {
    let mut mlp = Mlp::new(MlpSpec {
        init_seed: seed,
        ..spec.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut flat = mlp.to_flat();
    // Biases start at zero; perturb everything so each term is exercised.
    for v in flat.iter_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    mlp.set_flat(&flat)?;
    let input =
        Array2::from_shape_simple_fn((batch, spec.input_dim()), || rng.sample(StandardNormal));
    let g = Array2::from_shape_simple_fn((batch, spec.output_dim()), || rng.sample(StandardNormal));
    let (_, cache) = mlp.forward(input.view())?;
    let grads = mlp.backward(&cache, g.view())?;

    let objective =
        |m: &Mlp, x: &Array2<f64>| -> Result<f64> { Ok((m.predict(x.view())? * &g).sum()) };
    let mut worst: f64 = 0.0;
    let analytic = grads.to_flat();
    let mut probe = mlp.clone();
    for i in 0..flat.len() {
        let mut p = flat.clone();
        p[i] = flat[i] + FD_STEP;
        probe.set_flat(&p)?;
        let up = objective(&probe, &input)?;
        p[i] = flat[i] - FD_STEP;
        probe.set_flat(&p)?;
        let down = objective(&probe, &input)?;
        worst = worst.max(rel_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    for idx in 0..input.len() {
        let (r, c) = (idx / input.ncols(), idx % input.ncols());
        let mut x = input.clone();
        x[[r, c]] += FD_STEP;
        let up = objective(&mlp, &x)?;
        x[[r, c]] -= 2.0 * FD_STEP;
        let down = objective(&mlp, &x)?;
        worst = worst.max(rel_error(
            grads.input[[r, c]],
            (up - down) / (2.0 * FD_STEP),
        ));
    }
    Ok(worst)
}

/// Runs `instances` finite-difference checks on `spec` and returns an error if
/// any exceeds `tolerance`.
pub fn grad_check(spec: &MlpSpec, instances: usize, tolerance: f64) -> Result<GradCheckReport> {
    spec.validate()?;
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        worst = worst.max(grad_check_instance(
            spec,
            3,
            spec.init_seed.wrapping_add(k as u64),
        )?);
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
