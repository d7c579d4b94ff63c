//! A small dense-tensor convolutional network with exact backpropagation.
//!
//! Activations are single samples in channel-major order (`C x H x W`, or a
//! flat vector after the first fully connected layer). Batches are handled by
//! the caller, which accumulates per-sample gradients in a fixed order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::CHANNEL_ORDER;
use crate::heads::HeadSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRASPNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("cached activations are stale (pass generation {cached}, network generation {current})")]
    StaleCache { cached: u64, current: u64 },
    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config hash {found} does not match the expected network config {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(NnError::Shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    MaxPool { kernel: usize, stride: usize },
    Relu,
    Dropout { keep_prob: f64 },
    Linear { out_features: usize },
    /// Cross-channel local response normalization.
    Lrn { size: usize, alpha: f64, beta: f64, k: f64 },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Linear { .. } => "fc",
            LayerSpec::Lrn { .. } => "lrn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
    /// Inputs are multiplied by this before the first layer.
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl NetworkConfig {
    /// Shapes after each layer, starting with the input. Fails on incompatible
    /// layers or when the last layer does not produce the head's output size.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnError::Config("input extents must be positive".into()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(NnError::Config(format!("input scale {} must be positive", self.input_scale)));
        }
        let mut shapes = vec![Shape::Chw(c, h, w)];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().expect("input shape");
            let bad = |m: &str| NnError::Config(format!("layer {i} ({}): {m}", layer.name()));
            let next = match (*layer, cur) {
                (LayerSpec::Conv { out_channels, kernel, stride, pad }, Shape::Chw(_, h, w)) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("extents must be positive"));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(bad("kernel larger than padded input"));
                    }
                    Shape::Chw(out_channels, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1)
                }
                (LayerSpec::MaxPool { kernel, stride }, Shape::Chw(c, h, w)) => {
                    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                        return Err(bad("pool window does not fit"));
                    }
                    Shape::Chw(c, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
                }
                (LayerSpec::Lrn { size, .. }, s @ Shape::Chw(..)) => {
                    if size == 0 {
                        return Err(bad("window must be positive"));
                    }
                    s
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dropout { keep_prob }, s) => {
                    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                        return Err(bad("keep probability must be in (0, 1]"));
                    }
                    s
                }
                (LayerSpec::Linear { out_features }, _) => {
                    if out_features == 0 {
                        return Err(bad("out_features must be positive"));
                    }
                    Shape::Flat(out_features)
                }
                (_, Shape::Flat(_)) => return Err(bad("needs a spatial input")),
            };
            shapes.push(next);
        }
        match (self.layers.last(), shapes.last()) {
            (Some(LayerSpec::Linear { out_features }), _) if *out_features == self.head.output_dim() => Ok(shapes),
            _ => Err(NnError::Config(format!(
                "network must end in a fully connected layer with {} outputs for head {:?}",
                self.head.output_dim(),
                self.head
            ))),
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }

    /// Desk-scale network: two conv/pool stages and two fully connected layers.
    pub fn tiny(input_size: usize, head: HeadSpec, dropout_keep: f64) -> Self {
        NetworkConfig {
            input: [3, input_size, input_size],
            layers: vec![
                LayerSpec::Conv { out_channels: 8, kernel: 5, stride: 1, pad: 2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Linear { out_features: 64 },
                LayerSpec::Relu,
                LayerSpec::Dropout { keep_prob: dropout_keep },
                LayerSpec::Linear { out_features: head.output_dim() },
            ],
            head,
            input_scale: 1.0 / 128.0,
        }
    }

    /// The full-scale architecture: five convolutions (with normalization and
    /// pooling after the first two and pooling after the fifth) and three fully
    /// connected layers, for a 224 x 224 input.
    pub fn full_scale(head: HeadSpec, dropout_keep: f64) -> Self {
        let lrn = LayerSpec::Lrn { size: 5, alpha: 1e-4, beta: 0.75, k: 2.0 };
        NetworkConfig {
            input: [3, 224, 224],
            layers: vec![
                LayerSpec::Conv { out_channels: 96, kernel: 11, stride: 4, pad: 2 },
                LayerSpec::Relu,
                lrn,
                LayerSpec::MaxPool { kernel: 3, stride: 2 },
                LayerSpec::Conv { out_channels: 256, kernel: 5, stride: 1, pad: 2 },
                LayerSpec::Relu,
                lrn,
                LayerSpec::MaxPool { kernel: 3, stride: 2 },
                LayerSpec::Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 384, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { out_channels: 256, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 3, stride: 2 },
                LayerSpec::Linear { out_features: 4096 },
                LayerSpec::Relu,
                LayerSpec::Dropout { keep_prob: dropout_keep },
                LayerSpec::Linear { out_features: 4096 },
                LayerSpec::Relu,
                LayerSpec::Dropout { keep_prob: dropout_keep },
                LayerSpec::Linear { out_features: head.output_dim() },
            ],
            head,
            input_scale: 1.0,
        }
    }

    pub fn parameter_count(&self) -> Result<usize, NnError> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| param_shapes(l, s).iter().map(|p| p.iter().product::<usize>()).sum::<usize>())
            .sum())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn param_shapes(layer: &LayerSpec, input: &Shape) -> Vec<Vec<usize>> {
    match (*layer, *input) {
        (LayerSpec::Conv { out_channels, kernel, .. }, Shape::Chw(c, ..)) => {
            vec![vec![out_channels, c, kernel, kernel], vec![out_channels]]
        }
        (LayerSpec::Linear { out_features }, s) => vec![vec![out_features, s.len()], vec![out_features]],
        _ => vec![],
    }
}

/// Optimizer and schedule settings. Defaults are the full-scale values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout_keep: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the cross-entropy term for the combined head.
    pub class_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            weight_decay: 0.001,
            dropout_keep: 0.5,
            epochs: 25,
            batch_size: 64,
            seed: 0,
            class_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.dropout_keep > 0.0
            && self.dropout_keep <= 1.0
            && self.batch_size > 0
            && self.class_loss_weight >= 0.0
            && self.class_loss_weight.is_finite();
        if ok {
            Ok(())
        } else {
            Err(NnError::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Deliberate backward-pass faults, used to show that the gradient check
/// catches wrong derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// ReLU passes the upstream gradient through unmasked.
    ReluPassThrough,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    shapes: Vec<Shape>,
    params: Vec<Tensor>,
    /// `params[param_offset[i]..]` belong to layer `i`.
    param_offset: Vec<usize>,
    generation: u64,
    mutation: Option<Mutation>,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    PoolArgmax(Vec<usize>),
    DropScale(Vec<f64>),
    LrnScale(Vec<f64>),
}

/// Output of a forward pass plus what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    aux: Vec<Aux>,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Vec<f64>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NnError> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut param_offset = Vec::with_capacity(config.layers.len());
        for (layer, input) in config.layers.iter().zip(&shapes) {
            param_offset.push(params.len());
            let ps = param_shapes(layer, input);
            if ps.is_empty() {
                continue;
            }
            let (fan_in, fan_out) = match ps[0].as_slice() {
                [o, i, k, k2] => (i * k * k2, o * k * k2),
                [o, i] => (*i, *o),
                _ => unreachable!(),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Tensor::zeros(&ps[0]);
            w.data.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
            params.push(w);
            params.push(Tensor::zeros(&ps[1]));
        }
        Ok(Network { config, shapes, params, param_offset, generation: 0, mutation: None })
    }

    /// Rebuilds a network from stored parameters, checking their shapes.
    pub fn with_params(config: NetworkConfig, params: Vec<Tensor>) -> Result<Self, NnError> {
        let mut net = Network::new(config, 0)?;
        if params.len() != net.params.len()
            || params.iter().zip(&net.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NnError::Shape("parameter tensors do not match the network config".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward passes.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.generation += 1;
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("shapes").len()
    }

    pub fn input_len(&self) -> usize {
        self.shapes[0].len()
    }

    #[doc(hidden)]
    pub fn set_mutation(&mut self, m: Option<Mutation>) {
        self.mutation = m;
    }

    pub fn forward_eval(&self, input: &[f64]) -> Result<ForwardPass, NnError> {
        self.forward_impl(input, Mode::Eval, None::<&mut ChaCha8Rng>)
    }

    /// Train mode draws dropout masks from `rng` and scales kept units by
    /// `1 / keep_prob`; eval mode is deterministic.
    pub fn forward<R: Rng>(&self, input: &[f64], mode: Mode, rng: &mut R) -> Result<ForwardPass, NnError> {
        self.forward_impl(input, mode, Some(rng))
    }

    fn forward_impl<R: Rng>(&self, input: &[f64], mode: Mode, mut rng: Option<&mut R>) -> Result<ForwardPass, NnError> {
        if input.len() != self.input_len() {
            return Err(NnError::Shape(format!("input has {} values, network expects {}", input.len(), self.input_len())));
        }
        let mut inputs = Vec::with_capacity(self.config.layers.len());
        let mut aux = Vec::with_capacity(self.config.layers.len());
        let scale = self.config.input_scale;
        let mut x: Vec<f64> = input.iter().map(|v| v * scale).collect();
        for (i, layer) in self.config.layers.iter().enumerate() {
            let (ins, outs) = (self.shapes[i], self.shapes[i + 1]);
            let p = &self.params[self.param_offset[i]..];
            let (y, a) = match *layer {
                LayerSpec::Conv { stride, pad, .. } => (conv_forward(&x, ins, outs, &p[0].data, &p[1].data, p[0].shape[2], stride, pad), Aux::None),
                LayerSpec::MaxPool { kernel, stride } => {
                    let (y, idx) = pool_forward(&x, ins, outs, kernel, stride);
                    (y, Aux::PoolArgmax(idx))
                }
                LayerSpec::Relu => (x.iter().map(|v| v.max(0.0)).collect(), Aux::None),
                LayerSpec::Dropout { keep_prob } => match (mode, rng.as_deref_mut()) {
                    (Mode::Train, Some(r)) if keep_prob < 1.0 => {
                        let scale: Vec<f64> =
                            (0..x.len()).map(|_| if r.gen::<f64>() < keep_prob { 1.0 / keep_prob } else { 0.0 }).collect();
                        (x.iter().zip(&scale).map(|(v, s)| v * s).collect(), Aux::DropScale(scale))
                    }
                    _ => (x.clone(), Aux::None),
                },
                LayerSpec::Linear { .. } => (linear_forward(&x, &p[0].data, &p[1].data), Aux::None),
                LayerSpec::Lrn { size, alpha, beta, k } => {
                    let (y, s) = lrn_forward(&x, ins, size, alpha, beta, k);
                    (y, Aux::LrnScale(s))
                }
            };
            inputs.push(std::mem::replace(&mut x, y));
            aux.push(a);
        }
        Ok(ForwardPass { output: x, inputs, aux, generation: self.generation })
    }

    /// Exact gradients of `dot(output_gradient, output)` with respect to every
    /// parameter and to the input.
    pub fn backward(&self, pass: &ForwardPass, output_gradient: &[f64]) -> Result<Gradients, NnError> {
        if pass.generation != self.generation || pass.inputs.len() != self.config.layers.len() {
            return Err(NnError::StaleCache { cached: pass.generation, current: self.generation });
        }
        if output_gradient.len() != pass.output.len() {
            return Err(NnError::Shape(format!(
                "output gradient has {} values, output has {}",
                output_gradient.len(),
                pass.output.len()
            )));
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let mut g = output_gradient.to_vec();
        for i in (0..self.config.layers.len()).rev() {
            let (ins, outs) = (self.shapes[i], self.shapes[i + 1]);
            let x = &pass.inputs[i];
            let off = self.param_offset[i];
            g = match (self.config.layers[i], &pass.aux[i]) {
                (LayerSpec::Conv { stride, pad, kernel, .. }, _) => {
                    let (gw, rest) = grads[off..].split_at_mut(1);
                    conv_backward(x, &g, ins, outs, &self.params[off].data, kernel, stride, pad, &mut gw[0].data, &mut rest[0].data)
                }
                (LayerSpec::MaxPool { .. }, Aux::PoolArgmax(idx)) => {
                    let mut gi = vec![0.0; ins.len()];
                    for (o, &src) in idx.iter().enumerate() {
                        gi[src] += g[o];
                    }
                    gi
                }
                (LayerSpec::Relu, _) => match self.mutation {
                    Some(Mutation::ReluPassThrough) => g,
                    None => x.iter().zip(&g).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect(),
                },
                (LayerSpec::Dropout { .. }, Aux::DropScale(s)) => g.iter().zip(s).map(|(a, b)| a * b).collect(),
                (LayerSpec::Dropout { .. }, _) => g,
                (LayerSpec::Linear { .. }, _) => {
                    let (gw, rest) = grads[off..].split_at_mut(1);
                    linear_backward(x, &g, &self.params[off].data, &mut gw[0].data, &mut rest[0].data)
                }
                (LayerSpec::Lrn { size, alpha, beta, .. }, Aux::LrnScale(s)) => lrn_backward(x, &g, s, ins, size, alpha, beta),
                (l, _) => unreachable!("missing cache for {}", l.name()),
            };
        }
        let scale = self.config.input_scale;
        g.iter_mut().for_each(|v| *v *= scale);
        Ok(Gradients { params: grads, input: g })
    }

    /// `w <- w - lr * (g + weight_decay * w)` for every parameter. Refuses
    /// non-finite gradients.
    pub fn sgd_step(&mut self, grads: &[Tensor], learning_rate: f64, weight_decay: f64) -> Result<(), NnError> {
        if grads.len() != self.params.len() {
            return Err(NnError::Shape("gradient list does not match parameters".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape != self.params[i].shape {
                return Err(NnError::Shape(format!("gradient {i} has shape {:?}", g.shape)));
            }
            if let Some(bad) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(NnError::Divergence(format!(
                    "non-finite gradient {} at element {bad} of parameter tensor {i} {:?}",
                    g.data[bad], g.shape
                )));
            }
        }
        for (p, g) in self.params_mut().iter_mut().zip(grads) {
            sgd_update(&mut p.data, &g.data, learning_rate, weight_decay);
        }
        Ok(())
    }

    /// Index of the layer owning each parameter tensor.
    pub fn param_layers(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.params.len());
        for (li, &off) in self.param_offset.iter().enumerate() {
            let end = self.param_offset.get(li + 1).copied().unwrap_or(self.params.len());
            out.extend(std::iter::repeat_n(li, end - off));
        }
        out
    }
}

pub fn sgd_update(w: &mut [f64], g: &[f64], learning_rate: f64, weight_decay: f64) {
    for (wi, gi) in w.iter_mut().zip(g) {
        *wi -= learning_rate * (gi + weight_decay * *wi);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(x: &[f64], ins: Shape, outs: Shape, w: &[f64], b: &[f64], k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (Shape::Chw(ci, ih, iw), Shape::Chw(co, oh, ow)) = (ins, outs) else { unreachable!() };
    let mut y = vec![0.0; co * oh * ow];
    for oc in 0..co {
        let out = &mut y[oc * oh * ow..(oc + 1) * oh * ow];
        out.iter_mut().for_each(|v| *v = b[oc]);
        for ic in 0..ci {
            let plane = &x[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(kx, pad, stride, iw, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * iw..(iy as usize + 1) * iw];
                        let orow = &mut out[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_range(kx: usize, pad: usize, stride: usize, iw: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if iw + pad > kx { ((iw + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    g: &[f64],
    ins: Shape,
    outs: Shape,
    w: &[f64],
    k: usize,
    stride: usize,
    pad: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let (Shape::Chw(ci, ih, iw), Shape::Chw(co, oh, ow)) = (ins, outs) else { unreachable!() };
    let mut gx = vec![0.0; ci * ih * iw];
    for oc in 0..co {
        let go = &g[oc * oh * ow..(oc + 1) * oh * ow];
        gb[oc] += go.iter().sum::<f64>();
        for ic in 0..ci {
            let plane = &x[ic * ih * iw..(ic + 1) * ih * iw];
            let gplane = &mut gx[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((oc * ci + ic) * k + ky) * k + kx;
                    let wv = w[wi];
                    let (ox0, ox1) = valid_range(kx, pad, stride, iw, ow);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let base = iy as usize * iw;
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = base + ox * stride + kx - pad;
                            acc += grow[ox] * plane[ix];
                            gplane[ix] += wv * grow[ox];
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    gx
}

fn pool_forward(x: &[f64], ins: Shape, outs: Shape, k: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let (Shape::Chw(c, ih, iw), Shape::Chw(_, oh, ow)) = (ins, outs) else { unreachable!() };
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = ch * ih * iw + (oy * stride + ky) * iw + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                y.push(best);
                idx.push(bi);
            }
        }
    }
    (y, idx)
}

fn linear_forward(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter().enumerate().map(|(o, bo)| bo + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

fn linear_backward(x: &[f64], g: &[f64], w: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut gx = vec![0.0; n];
    for (o, go) in g.iter().enumerate() {
        gb[o] += go;
        if *go == 0.0 {
            continue;
        }
        let row = &w[o * n..(o + 1) * n];
        let grow = &mut gw[o * n..(o + 1) * n];
        for j in 0..n {
            grow[j] += go * x[j];
            gx[j] += go * row[j];
        }
    }
    gx
}

fn lrn_window(c: usize, channels: usize, size: usize) -> (usize, usize) {
    let half = size / 2;
    (c.saturating_sub(half), (c + size - half).min(channels))
}

/// `y_c = x_c / (k + alpha / size * sum_{c' near c} x_{c'}^2)^beta`; returns
/// the denominators' bases for backward.
fn lrn_forward(x: &[f64], s: Shape, size: usize, alpha: f64, beta: f64, k: f64) -> (Vec<f64>, Vec<f64>) {
    let Shape::Chw(c, h, w) = s else { unreachable!() };
    let plane = h * w;
    let mut scale = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let (lo, hi) = lrn_window(ch, c, size);
        for p in 0..plane {
            let sum: f64 = (lo..hi).map(|j| x[j * plane + p].powi(2)).sum();
            let sc = k + alpha / size as f64 * sum;
            scale[ch * plane + p] = sc;
            y[ch * plane + p] = x[ch * plane + p] * sc.powf(-beta);
        }
    }
    (y, scale)
}

fn lrn_backward(x: &[f64], g: &[f64], scale: &[f64], s: Shape, size: usize, alpha: f64, beta: f64) -> Vec<f64> {
    let Shape::Chw(c, h, w) = s else { unreachable!() };
    let plane = h * w;
    let mut gx = vec![0.0; x.len()];
    for ch in 0..c {
        for p in 0..plane {
            let i = ch * plane + p;
            gx[i] += g[i] * scale[i].powf(-beta);
        }
    }
    // cross terms: y_c depends on x_j for j in window(c)
    let coef = 2.0 * alpha * beta / size as f64;
    for ch in 0..c {
        let (lo, hi) = lrn_window(ch, c, size);
        for p in 0..plane {
            let i = ch * plane + p;
            let t = g[i] * x[i] * scale[i].powf(-beta - 1.0);
            for j in lo..hi {
                gx[j * plane + p] -= coef * t * x[j * plane + p];
            }
        }
    }
    gx
}

/// Mean squared error over all elements, with its gradient.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::Shape(format!("mse over {} vs {} values", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `-log softmax(logits)[class]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> Result<(f64, Vec<f64>), NnError> {
    if class >= logits.len() {
        return Err(NnError::InvalidClass { index: class, classes: logits.len() });
    }
    let p = softmax(logits);
    let loss = -p[class].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[class] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(layer index, layer name, max relative error)` for layers with parameters.
    pub per_layer: Vec<(usize, String, f64)>,
    pub parameters_checked: usize,
}

/// Compares backprop gradients with central differences
/// `(f(w + eps) - f(w - eps)) / 2 eps` for every parameter, with dropout
/// disabled. The error per parameter is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(net: &Network, input: &[f64], loss: F, epsilon: f64) -> Result<GradCheckReport, NnError>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), NnError>,
{
    let pass = net.forward_eval(input)?;
    let (_, gout) = loss(&pass.output)?;
    let analytic = net.backward(&pass, &gout)?;
    let layer_of = net.param_layers();

    let mut probe = net.clone();
    probe.mutation = None;
    let mut per_layer: Vec<(usize, String, f64)> = Vec::new();
    let mut worst = 0.0f64;
    let mut count = 0;
    for t in 0..probe.params.len() {
        let layer = layer_of[t];
        if per_layer.last().map(|l| l.0) != Some(layer) {
            per_layer.push((layer, net.config.layers[layer].name().to_string(), 0.0));
        }
        for e in 0..probe.params[t].len() {
            let orig = probe.params[t].data[e];
            probe.params[t].data[e] = orig + epsilon;
            let fp = loss(&probe.forward_eval(input)?.output)?.0;
            probe.params[t].data[e] = orig - epsilon;
            let fm = loss(&probe.forward_eval(input)?.output)?.0;
            probe.params[t].data[e] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic.params[t].data[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
            let slot = per_layer.last_mut().expect("pushed above");
            slot.2 = slot.2.max(err);
            count += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, per_layer, parameters_checked: count })
}

/// Free-form metadata stored alongside checkpoint parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub fold: Option<usize>,
    #[serde(default)]
    pub extra: std::collections::BTreeMap<String, String>,
}

fn put_section(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Serializes a network: magic, format version, channel-order tag, config
/// hash, config JSON, metadata JSON, then every parameter tensor as
/// length-prefixed little-endian f64 values.
pub fn encode_checkpoint(net: &Network, meta: &CheckpointMeta) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_section(&mut buf, CHANNEL_ORDER.as_bytes());
    put_section(&mut buf, net.config.hash().as_bytes());
    put_section(&mut buf, serde_json::to_string(&net.config).expect("config").as_bytes());
    put_section(&mut buf, serde_json::to_string(meta).expect("meta").as_bytes());
    buf.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for p in &net.params {
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.rest.len() < n {
            return Err(NnError::Corrupt(format!("truncated: wanted {n} more bytes, {} left", self.rest.len())));
        }
        let (a, b) = self.rest.split_at(n);
        self.rest = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self) -> Result<&'a str, NnError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| NnError::Corrupt(e.to_string()))
    }
}

/// Parses a checkpoint. With `expected`, the stored config hash must match it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<(Network, CheckpointMeta), NnError> {
    let mut r = Reader { rest: bytes };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(NnError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let order = r.section()?;
    if order != CHANNEL_ORDER {
        return Err(NnError::Corrupt(format!("unknown grid channel order {order:?}")));
    }
    let hash = r.section()?.to_string();
    let config: NetworkConfig = serde_json::from_str(r.section()?).map_err(|e| NnError::Corrupt(e.to_string()))?;
    if config.hash() != hash {
        return Err(NnError::Corrupt("stored config does not match its hash".into()));
    }
    if let Some(exp) = expected {
        let want = exp.hash();
        if want != hash {
            return Err(NnError::HashMismatch { found: hash, expected: want });
        }
    }
    let meta: CheckpointMeta = serde_json::from_str(r.section()?).map_err(|e| NnError::Corrupt(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nd = r.u32()? as usize;
        if nd > 8 {
            return Err(NnError::Corrupt(format!("tensor rank {nd}")));
        }
        let shape: Vec<usize> = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| NnError::Corrupt("tensor size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(Tensor::from_vec(&shape, data).map_err(|e| NnError::Corrupt(e.to_string()))?);
    }
    if !r.rest.is_empty() {
        return Err(NnError::Corrupt(format!("{} trailing bytes", r.rest.len())));
    }
    let net = Network::with_params(config, params).map_err(|e| NnError::Corrupt(e.to_string()))?;
    Ok((net, meta))
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<(), NnError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(net, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<(Network, CheckpointMeta), NnError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, expected)
}
