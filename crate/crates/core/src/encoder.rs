//! A small tanh MLP encoder with exact reverse-mode gradients, its EMA
//! (momentum) shadow, frozen snapshots, and Adam with linear warmup.
//!
//! Parameters live in one flat `Vec<f64>`. For each layer `l` (input width
//! `dims[l]`, output width `dims[l+1]`) the weight matrix is stored row-major
//! (`out × in`) followed by the bias vector. Hidden layers apply `tanh`; the
//! output layer is linear and its result is L2-normalized.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_norm, FeatureVector, MIN_NORM};
use crate::rng::Rng;

/// Layer widths, input first: `[d_in, hidden.., d_out]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    dims: Vec<usize>,
}

impl Layout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|d| *d == 0) {
            return Err(Error::InvalidConfig(format!(
                "encoder layout needs at least two positive widths, got {dims:?}"
            )));
        }
        Ok(Layout { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_out(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of (weights, bias) for layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.dims[..=l]
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (start, start + self.dims[l] * self.dims[l + 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layout: Layout,
    values: Vec<f64>,
}

/// Intermediates of one forward pass, consumed by [`EncoderParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by every hidden activation.
    activations: Vec<Vec<f64>>,
    pre_norm_norm: f64,
    output: FeatureVector,
}

impl ForwardCache {
    pub fn output(&self) -> &FeatureVector {
        &self.output
    }
}

impl EncoderParams {
    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.num_params() {
            return Err(Error::DimensionMismatch {
                expected: layout.num_params(),
                actual: values.len(),
            });
        }
        Ok(EncoderParams { layout, values })
    }

    pub fn zeros(layout: Layout) -> Self {
        let n = layout.num_params();
        EncoderParams {
            layout,
            values: vec![0.0; n],
        }
    }

    /// Weights uniform in `±1/√fan_in`; biases zero.
    pub fn init(layout: Layout, rng: &mut Rng) -> Self {
        let mut values = Vec::with_capacity(layout.num_params());
        for w in layout.dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1]) {
                values.push(rng.random_range(-bound..bound));
            }
            values.extend(std::iter::repeat_n(0.0, w[1]));
        }
        EncoderParams { layout, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Mutable views of layer `l`'s (weights, bias).
    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layout.offsets(l);
        let end = b + self.layout.dims[l + 1];
        let (head, tail) = self.values[w..end].split_at_mut(b - w);
        (head, tail)
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layout.offsets(l);
        let end = b + self.layout.dims[l + 1];
        (&self.values[w..b], &self.values[b..end])
    }

    fn check_layout(&self, other: &Layout) -> Result<()> {
        if &self.layout != other {
            return Err(Error::LayoutMismatch {
                left: self.layout.dims.clone(),
                right: other.dims.clone(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<FeatureVector> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.layout.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.d_in(),
                actual: x.len(),
            });
        }
        let last = self.layout.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.layout.num_layers());
        activations.push(x.to_vec());
        let mut out = Vec::new();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let input = &activations[l];
            let n_in = input.len();
            let mut z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bias)| bias + dot(&w[o * n_in..(o + 1) * n_in], input))
                .collect();
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
                activations.push(z);
            } else {
                out = z;
            }
        }
        let norm = l2_norm(&out);
        if !norm.is_finite() || norm < MIN_NORM {
            return Err(Error::ZeroVector { norm });
        }
        let output = FeatureVector::from_unit_unchecked(out.iter().map(|v| v / norm).collect());
        Ok(ForwardCache {
            activations,
            pre_norm_norm: norm,
            output,
        })
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂f` at the normalized output.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let d_out = self.layout.d_out();
        if upstream.len() != d_out {
            return Err(Error::DimensionMismatch {
                expected: d_out,
                actual: upstream.len(),
            });
        }
        if grad.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                actual: grad.len(),
            });
        }
        // d(v/|v|)/dv = (I - f fᵀ) / |v|
        let f = cache.output.as_slice();
        let along = dot(upstream, f);
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(f)
            .map(|(g, fi)| (g - along * fi) / cache.pre_norm_norm)
            .collect();

        for l in (0..self.layout.num_layers()).rev() {
            let input = &cache.activations[l];
            let n_in = input.len();
            let (w_off, b_off) = self.layout.offsets(l);
            for (o, d) in delta.iter().enumerate() {
                grad[b_off + o] += d;
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.layer(l);
            let mut prev = vec![0.0; n_in];
            for (o, d) in delta.iter().enumerate() {
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            // tanh' = 1 - h²
            for (p, h) in prev.iter_mut().zip(input) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
        Ok(())
    }

    /// Immutable deep copy; training the source never touches it.
    pub fn freeze_snapshot(&self) -> FrozenEncoder {
        FrozenEncoder(self.clone())
    }
}

/// A read-only encoder snapshot (`θ_{s−1}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder(EncoderParams);

impl FrozenEncoder {
    pub fn params(&self) -> &EncoderParams {
        &self.0
    }

    pub fn forward(&self, x: &[f64]) -> Result<FeatureVector> {
        self.0.forward(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl EmaConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "EMA alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(EmaConfig { alpha })
    }
}

/// In place: `θ_m ← α·θ_m + (1−α)·θ`.
pub fn ema_update(theta_m: &mut EncoderParams, theta: &EncoderParams, cfg: EmaConfig) -> Result<()> {
    theta_m.check_layout(&theta.layout)?;
    let a = cfg.alpha;
    for (m, t) in theta_m.values.iter_mut().zip(&theta.values) {
        *m = a * *m + (1.0 - a) * t;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 3.5e-4,
            warmup_epochs: 10,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// `base_lr · min(1, (epoch+1)/warmup_epochs)`, no decay afterwards.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            return self.base_lr;
        }
        self.base_lr * ((epoch + 1) as f64 / self.warmup_epochs as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, layout: &Layout) -> Self {
        let n = layout.num_params();
        OptimizerState {
            config,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with decoupled weight decay.
    pub fn adam_step(&mut self, params: &mut EncoderParams, grads: &[f64], epoch: usize) -> Result<()> {
        if grads.len() != params.values.len() || self.first_moment.len() != grads.len() {
            return Err(Error::LayoutMismatch {
                left: vec![params.values.len(), self.first_moment.len()],
                right: vec![grads.len()],
            });
        }
        let c = self.config;
        self.step += 1;
        let lr = c.effective_lr(epoch);
        let bias1 = 1.0 - c.beta1.powf(self.step as f64);
        let bias2 = 1.0 - c.beta2.powf(self.step as f64);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk momentum encoder plus the pipeline PRNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub params: EncoderParams,
    pub rng: Option<Rng>,
}

impl Checkpoint {
    pub fn new(step: usize, params: EncoderParams, rng: Option<Rng>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            params,
            rng,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = bincode::deserialize(&bytes)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if ck.params.values.len() != ck.params.layout.num_params() {
            return Err(Error::Encoding("checkpoint parameter count disagrees with layout".into()));
        }
        Ok(ck)
    }
}
