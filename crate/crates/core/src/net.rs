//! A small feed-forward network with hand-written backpropagation.
//!
//! Layout: a one-dimensional valid convolution over the scaled stock vector,
//! SELU, flatten, concatenation with the scaled scalar features, then a
//! stack of dense blocks (linear, layer norm, SELU) and a linear head with
//! `actions * outputs_per_action` outputs.
//!
//! Parameters live in one flat `Vec<f64>` so the optimizer, target-network
//! sync, and checkpointing all work on a single buffer. All math is f64;
//! checkpoints are JSON, which round-trips f64 exactly.

use crate::env::Observation;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

pub const SELU_ALPHA: f64 = 1.6732632423543772;
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
/// Layer norm denominators are floored here to avoid dividing by a vanishing
/// standard deviation.
pub const LAYER_NORM_FLOOR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("bad network spec: {0}")]
    BadSpec(String),
    #[error("checkpoint format version {0} is not supported")]
    UnsupportedVersion(u32),
    #[error("checkpoint holds {got} parameters but the spec needs {expected}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Architecture description. Two specs are compatible exactly when they are
/// equal; checkpoints embed the spec for that reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Width of the stock vector (shelf capacity).
    pub stock_len: usize,
    /// Days of demand forecast appended to the features.
    pub horizon: usize,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    /// Dense block widths after the convolution.
    pub trunk: Vec<usize>,
    pub actions: usize,
    /// Outputs per action: 1 for plain value heads, the number of quantile
    /// levels for distributional heads, 4 for distribution-parameter heads.
    pub outputs_per_action: usize,
    /// Divisor applied to shelf lives before they enter the network.
    pub stock_scale: f64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.conv_kernel == 0 || self.conv_channels == 0 {
            return Err(NetError::BadSpec("convolution kernel and channels must be positive".into()));
        }
        if self.stock_len < self.conv_kernel {
            return Err(NetError::BadSpec(format!(
                "stock length {} is shorter than the convolution kernel {}",
                self.stock_len, self.conv_kernel
            )));
        }
        if self.actions == 0 || self.outputs_per_action == 0 {
            return Err(NetError::BadSpec("head must have at least one action and one output".into()));
        }
        if self.trunk.iter().any(|&w| w == 0) {
            return Err(NetError::BadSpec("trunk widths must be positive".into()));
        }
        if !(self.stock_scale > 0.0 && self.stock_scale.is_finite()) {
            return Err(NetError::BadSpec(format!("stock scale must be positive, got {}", self.stock_scale)));
        }
        Ok(())
    }

    pub fn conv_out_len(&self) -> usize {
        self.stock_len - self.conv_kernel + 1
    }

    pub fn extras_len(&self) -> usize {
        // Shelf life at order, the forecast, cost, and price.
        self.horizon + 3
    }

    pub fn feature_len(&self) -> usize {
        self.stock_len + self.extras_len()
    }

    pub fn concat_len(&self) -> usize {
        self.conv_channels * self.conv_out_len() + self.extras_len()
    }

    pub fn head_in(&self) -> usize {
        self.trunk.last().copied().unwrap_or_else(|| self.concat_len())
    }

    pub fn head_out(&self) -> usize {
        self.actions * self.outputs_per_action
    }
}

/// Byte offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Shapes {
    conv_w: Range<usize>,
    conv_b: Range<usize>,
    layers: Vec<LayerShape>,
    head_w: Range<usize>,
    head_b: Range<usize>,
    total: usize,
}

#[derive(Debug, Clone)]
struct LayerShape {
    w: Range<usize>,
    b: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
    in_dim: usize,
    out_dim: usize,
}

impl Shapes {
    fn from_spec(spec: &NetworkSpec) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let conv_w = take(spec.conv_channels * spec.conv_kernel);
        let conv_b = take(spec.conv_channels);
        let mut layers = Vec::with_capacity(spec.trunk.len());
        let mut in_dim = spec.concat_len();
        for &out_dim in &spec.trunk {
            layers.push(LayerShape {
                w: take(out_dim * in_dim),
                b: take(out_dim),
                gamma: take(out_dim),
                beta: take(out_dim),
                in_dim,
                out_dim,
            });
            in_dim = out_dim;
        }
        let head_w = take(spec.head_out() * in_dim);
        let head_b = take(spec.head_out());
        Shapes { conv_w, conv_b, layers, head_w, head_b, total: at }
    }
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Scales an observation into the network's input features, in observation
/// order: stock vector, shelf life at order, forecast, cost, price. Shelf
/// lives are divided by `stock_scale`; unbounded positives go through
/// `ln(1 + x)`.
pub fn encode_features(obs: &Observation, stock_scale: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(obs.stock_vector.len() + obs.forecast.len() + 3);
    for &s in &obs.stock_vector {
        f.push(s / stock_scale);
    }
    f.push(obs.shelf_life_at_order as f64 / stock_scale);
    for &x in &obs.forecast {
        f.push(x.ln_1p());
    }
    f.push(obs.cost.ln_1p());
    f.push(obs.price.ln_1p());
    f
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stock: Vec<f64>,
    conv_pre: Vec<f64>,
    concat: Vec<f64>,
    blocks: Vec<BlockCache>,
    head_in: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x_hat: Vec<f64>,
    denom: f64,
    floored: bool,
    ln_out: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Shapes,
    params: Vec<f64>,
}

impl Network {
    /// LeCun-normal initialization: weights are N(0, 1/fan_in), biases zero,
    /// layer norm gains one.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let shapes = Shapes::from_spec(&spec);
        let mut params = vec![0.0; shapes.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let sd = (1.0 / fan_in as f64).sqrt();
            for i in range {
                let z: f64 = StandardNormal.sample(&mut rng);
                params[i] = z * sd;
            }
        };
        fill(shapes.conv_w.clone(), spec.conv_kernel, &mut params);
        for layer in &shapes.layers {
            fill(layer.w.clone(), layer.in_dim, &mut params);
            params[layer.gamma.clone()].fill(1.0);
        }
        fill(shapes.head_w.clone(), spec.head_in(), &mut params);
        Ok(Self { spec, shapes, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<f64>) -> Result<Self, NetError> {
        spec.validate()?;
        let shapes = Shapes::from_spec(&spec);
        if params.len() != shapes.total {
            return Err(NetError::ParamCountMismatch { expected: shapes.total, got: params.len() });
        }
        Ok(Self { spec, shapes, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.shapes.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Copies another network's parameters (the target-network sync).
    pub fn sync_from(&mut self, source: &Network) {
        debug_assert_eq!(self.spec, source.spec, "sync between incompatible networks");
        self.params.copy_from_slice(&source.params);
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.shapes.total]
    }

    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        self.forward_cached(features).0
    }

    pub fn forward_cached(&self, features: &[f64]) -> (Vec<f64>, ForwardCache) {
        let spec = &self.spec;
        assert_eq!(
            features.len(),
            spec.feature_len(),
            "feature vector must have length {}",
            spec.feature_len()
        );
        let p = &self.params;
        let stock = &features[..spec.stock_len];
        let extras = &features[spec.stock_len..];

        // Valid convolution over the stock vector, one input channel.
        let out_len = spec.conv_out_len();
        let k = spec.conv_kernel;
        let mut conv_pre = vec![0.0; spec.conv_channels * out_len];
        for c in 0..spec.conv_channels {
            let w = &p[self.shapes.conv_w.clone()][c * k..(c + 1) * k];
            let b = p[self.shapes.conv_b.clone()][c];
            for i in 0..out_len {
                let mut acc = b;
                for j in 0..k {
                    acc += w[j] * stock[i + j];
                }
                conv_pre[c * out_len + i] = acc;
            }
        }
        let mut concat = Vec::with_capacity(spec.concat_len());
        concat.extend(conv_pre.iter().map(|&x| selu(x)));
        concat.extend_from_slice(extras);

        let mut x = concat.clone();
        let mut blocks = Vec::with_capacity(self.shapes.layers.len());
        for layer in &self.shapes.layers {
            let lin_out = self.linear(&p[layer.w.clone()], &p[layer.b.clone()], &x, layer.in_dim, layer.out_dim);
            let d = layer.out_dim as f64;
            let mean = lin_out.iter().sum::<f64>() / d;
            let var = lin_out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sd = var.sqrt();
            let floored = sd < LAYER_NORM_FLOOR;
            let denom = sd.max(LAYER_NORM_FLOOR);
            let x_hat: Vec<f64> = lin_out.iter().map(|&v| (v - mean) / denom).collect();
            let gamma = &p[layer.gamma.clone()];
            let beta = &p[layer.beta.clone()];
            let ln_out: Vec<f64> =
                x_hat.iter().zip(gamma.iter().zip(beta)).map(|(&xh, (&g, &b))| g * xh + b).collect();
            x = ln_out.iter().map(|&v| selu(v)).collect();
            blocks.push(BlockCache { x_hat, denom, floored, ln_out, act: x.clone() });
        }

        let head_in = x;
        let output = self.linear(
            &p[self.shapes.head_w.clone()],
            &p[self.shapes.head_b.clone()],
            &head_in,
            spec.head_in(),
            spec.head_out(),
        );
        let cache = ForwardCache { stock: stock.to_vec(), conv_pre, concat, blocks, head_in };
        (output, cache)
    }

    fn linear(&self, w: &[f64], b: &[f64], x: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), in_dim);
        let mut y = Vec::with_capacity(out_dim);
        for o in 0..out_dim {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for i in 0..in_dim {
                acc += row[i] * x[i];
            }
            y.push(acc);
        }
        y
    }

    /// Accumulates parameter gradients for one sample into `grads`, given
    /// the loss gradient with respect to the network output.
    pub fn backward_into(&self, cache: &ForwardCache, d_output: &[f64], grads: &mut [f64]) {
        let spec = &self.spec;
        assert_eq!(d_output.len(), spec.head_out());
        assert_eq!(grads.len(), self.shapes.total);
        let p = &self.params;

        // Head.
        let head_in_dim = spec.head_in();
        let mut dx = vec![0.0; head_in_dim];
        {
            let w = &p[self.shapes.head_w.clone()];
            let gw = self.shapes.head_w.start;
            let gb = self.shapes.head_b.start;
            for o in 0..spec.head_out() {
                let g = d_output[o];
                if g == 0.0 {
                    continue;
                }
                grads[gb + o] += g;
                let row = o * head_in_dim;
                for i in 0..head_in_dim {
                    grads[gw + row + i] += g * cache.head_in[i];
                    dx[i] += w[row + i] * g;
                }
            }
        }

        // Dense blocks, in reverse: SELU, layer norm, linear.
        for idx in (0..self.shapes.layers.len()).rev() {
            let layer = &self.shapes.layers[idx];
            let block = &cache.blocks[idx];
            let d = layer.out_dim;
            let mut d_ln = vec![0.0; d];
            for i in 0..d {
                d_ln[i] = dx[i] * selu_grad(block.ln_out[i]);
            }
            let gamma = &p[layer.gamma.clone()];
            let g_gamma = layer.gamma.start;
            let g_beta = layer.beta.start;
            let mut d_x_hat = vec![0.0; d];
            for i in 0..d {
                grads[g_gamma + i] += d_ln[i] * block.x_hat[i];
                grads[g_beta + i] += d_ln[i];
                d_x_hat[i] = d_ln[i] * gamma[i];
            }
            let n = d as f64;
            let mean_dxh = d_x_hat.iter().sum::<f64>() / n;
            let mut d_lin = vec![0.0; d];
            if block.floored {
                // The denominator is a constant here; only the mean couples.
                for i in 0..d {
                    d_lin[i] = (d_x_hat[i] - mean_dxh) / block.denom;
                }
            } else {
                let mean_dxh_xh =
                    d_x_hat.iter().zip(&block.x_hat).map(|(&a, &b)| a * b).sum::<f64>() / n;
                for i in 0..d {
                    d_lin[i] = (d_x_hat[i] - mean_dxh - block.x_hat[i] * mean_dxh_xh) / block.denom;
                }
            }
            // Linear backward. The block input is the previous activation.
            let x_in: &[f64] = if idx == 0 { &cache.concat } else { &cache.blocks[idx - 1].act };
            let w = &p[layer.w.clone()];
            let gw = layer.w.start;
            let gb = layer.b.start;
            let mut d_prev = vec![0.0; layer.in_dim];
            for o in 0..d {
                let g = d_lin[o];
                grads[gb + o] += g;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    grads[gw + row + i] += g * x_in[i];
                    d_prev[i] += w[row + i] * g;
                }
            }
            dx = d_prev;
        }

        // Convolution: the first part of `concat` is its SELU output. The
        // trailing extras of `concat` take gradient too, but it stops at the
        // input, so only the convolution's slice of `dx` matters here.
        let out_len = spec.conv_out_len();
        let k = spec.conv_kernel;
        let gw = self.shapes.conv_w.start;
        let gb = self.shapes.conv_b.start;
        for c in 0..spec.conv_channels {
            for i in 0..out_len {
                let flat = c * out_len + i;
                let g = dx[flat] * selu_grad(cache.conv_pre[flat]);
                if g == 0.0 {
                    continue;
                }
                grads[gb + c] += g;
                for j in 0..k {
                    grads[gw + c * k + j] += g * cache.stock[i + j];
                }
            }
        }
        // Gradients stop at the input; `cache.extras` needs no handling.
    }
}

/// Adam with bias correction, optional global-norm clipping, and a skip
/// counter for non-finite gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients with a larger global L2 norm are rescaled onto this sphere.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(10.0) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    skipped: u64,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub applied: bool,
    /// Global gradient norm before any clipping; NaN when skipped.
    pub grad_norm: f64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self { m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0, skipped: 0 }
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. A non-finite gradient anywhere skips the
    /// whole update and leaves parameters and moments untouched.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [f64], grads: &mut [f64]) -> StepReport {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let mut sq = 0.0;
        for &g in grads.iter() {
            sq += g * g;
        }
        if !sq.is_finite() {
            self.skipped += 1;
            return StepReport { applied: false, grad_norm: f64::NAN };
        }
        let norm = sq.sqrt();
        if let Some(clip) = cfg.clip_norm {
            if norm > clip {
                let scale = clip / norm;
                for g in grads.iter_mut() {
                    *g *= scale;
                }
            }
        }
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        StepReport { applied: true, grad_norm: norm }
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk network snapshot. The embedded spec guards against loading
/// weights into a different architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: NetworkSpec,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            spec: net.spec.clone(),
            params: net.params.clone(),
        }
    }

    pub fn into_network(self) -> Result<Network, NetError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NetError::UnsupportedVersion(self.format_version));
        }
        Network::from_parts(self.spec, self.params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}
