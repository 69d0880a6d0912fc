//! Same-padded 1D convolutional segmentation network.
//!
//! Architecture, for `depth` convolution layers and `C` channels:
//!
//! ```text
//! input [1 x L]
//!   -> conv 1->C, k taps, ReLU          (low-convolution block)
//!   -> (depth - 2) x conv C->C, k, ReLU (feature extraction)
//!   -> conv C->2, 1 tap                 (scoring layer, logits)
//! output [2 x L]
//! ```
//!
//! No layer changes the sequence length. Parameters are stored as `f32`
//! (the on-disk precision); activations and gradients are computed in `f64`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::BinaryMask;
use crate::rng::seeded;

pub const MIN_DEPTH: usize = 2;
pub const MAX_DEPTH: usize = 64;
const MAGIC: &[u8; 8] = b"QRSCNN1\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Total number of convolution layers, scoring layer included.
    pub depth: usize,
    pub channels: usize,
    pub kernel_len: usize,
    /// Sampling rate the model was built for. Informational.
    pub fs: u32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            channels: 8,
            kernel_len: 5,
            fs: 100,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::DepthOutOfRange(self.depth));
        }
        if self.channels == 0 {
            return Err(Error::InvalidParameter(
                "channels must be at least 1".into(),
            ));
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "kernel length {} must be odd",
                self.kernel_len
            )));
        }
        Ok(())
    }

    /// `(in_ch, out_ch, kernel_len)` of every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let c = self.channels;
        let k = self.kernel_len;
        let mut shapes = Vec::with_capacity(self.depth);
        shapes.push((1, c, k));
        for _ in 2..self.depth {
            shapes.push((c, c, k));
        }
        shapes.push((c, 2, 1));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel_len: usize,
    /// Row-major `[out_ch][in_ch][kernel_len]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel_len: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel_len,
            weights: vec![0.0; out_ch * in_ch * kernel_len],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn weight(&self, o: usize, c: usize, j: usize) -> f32 {
        self.weights[(o * self.in_ch + c) * self.kernel_len + j]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.out_ch * self.in_ch * self.kernel_len
            || self.bias.len() != self.out_ch
        {
            return Err(Error::ShapeMismatch(format!(
                "layer {}->{} k={} holds {} weights and {} biases",
                self.in_ch,
                self.out_ch,
                self.kernel_len,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

/// Channel-major activations `[channels x len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_signal(signal: &[f32]) -> Self {
        Self {
            channels: 1,
            len: signal.len(),
            data: signal.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.len + t]
    }
}

/// Two score planes per sample: background (0) and QRS (1).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPlane(FeatureMap);

impl LogitPlane {
    pub fn new(map: FeatureMap) -> Result<Self> {
        if map.channels != 2 {
            return Err(Error::ShapeMismatch(format!(
                "logit plane needs 2 channels, got {}",
                map.channels
            )));
        }
        Ok(Self(map))
    }

    pub fn len(&self) -> usize {
        self.0.len
    }

    pub fn is_empty(&self) -> bool {
        self.0.len == 0
    }

    pub fn background(&self) -> &[f64] {
        self.0.row(0)
    }

    pub fn qrs(&self) -> &[f64] {
        self.0.row(1)
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }
}

/// Offsets `t` such that `t + shift` stays inside `[0, len)`, if any.
#[inline]
fn valid_range(shift: isize, len: usize) -> Option<(usize, usize)> {
    let lo = (-shift).max(0);
    let hi = (len as isize - shift).min(len as isize);
    (lo < hi).then_some((lo as usize, hi as usize))
}

/// Same-padded cross-correlation of `input` with `layer`.
pub fn conv1d_forward(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    layer.check()?;
    if input.channels != layer.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, layer expects {}",
            input.channels, layer.in_ch
        )));
    }
    let len = input.len;
    let half = (layer.kernel_len / 2) as isize;
    let mut out = FeatureMap::zeros(layer.out_ch, len);
    for o in 0..layer.out_ch {
        let row = out.row_mut(o);
        row.fill(layer.bias[o] as f64);
        for c in 0..layer.in_ch {
            let x = input.row(c);
            for j in 0..layer.kernel_len {
                let w = layer.weight(o, c, j) as f64;
                if w == 0.0 {
                    continue;
                }
                let shift = j as isize - half;
                let Some((lo, hi)) = valid_range(shift, len) else {
                    continue;
                };
                let src = &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (y, &xv) in row[lo..hi].iter_mut().zip(src) {
                    *y += w * xv;
                }
            }
        }
    }
    Ok(out)
}

fn relu_in_place(map: &mut FeatureMap) {
    map.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Gradients of one layer, laid out like [`ConvLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(model: &CnnModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.bias.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flattened in parameter order: per layer, weights then biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Activations kept by a training forward pass: the input of every layer.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    layer_inputs: Vec<FeatureMap>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.layer_inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub config: ModelConfig,
    pub layers: Vec<ConvLayer>,
}

impl CnnModel {
    /// He-style uniform initialisation in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o, k)| {
                let bound = (6.0 / (i * k) as f64).sqrt();
                let mut layer = ConvLayer::zeros(i, o, k);
                layer
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-bound..bound) as f32);
                layer
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Architecture with every parameter set to zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o, k)| ConvLayer::zeros(i, o, k))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, segment: &[f32]) -> Result<LogitPlane> {
        let mut x = FeatureMap::from_signal(segment);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = conv1d_forward(&x, layer)?;
            if i < last {
                relu_in_place(&mut x);
            }
        }
        LogitPlane::new(x)
    }

    /// Forward pass that keeps the activations needed by [`CnnModel::backward`].
    pub fn forward_train(&self, segment: &[f32]) -> Result<(LogitPlane, ForwardCache)> {
        let mut cache = ForwardCache {
            layer_inputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = FeatureMap::from_signal(segment);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = conv1d_forward(&x, layer)?;
            if i < last {
                relu_in_place(&mut y);
            }
            cache.layer_inputs.push(std::mem::replace(&mut x, y));
        }
        Ok((LogitPlane::new(x)?, cache))
    }

    /// Back-propagates logit gradients to every weight and bias.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &FeatureMap) -> Result<Gradients> {
        if cache.layer_inputs.len() != self.layers.len() {
            return Err(Error::MissingCache);
        }
        if dlogits.channels != 2 || dlogits.len != cache.layer_inputs[0].len {
            return Err(Error::ShapeMismatch(format!(
                "dlogits [{} x {}] vs input length {}",
                dlogits.channels, dlogits.len, cache.layer_inputs[0].len
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut dout = dlogits.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.layer_inputs[li];
            let len = input.len;
            let half = (layer.kernel_len / 2) as isize;
            let g = &mut grads.layers[li];
            let need_input_grad = li > 0;
            let mut din = if need_input_grad {
                FeatureMap::zeros(layer.in_ch, len)
            } else {
                FeatureMap::zeros(0, 0)
            };
            for o in 0..layer.out_ch {
                let d = dout.row(o);
                g.bias[o] = d.iter().sum();
                for c in 0..layer.in_ch {
                    let x = input.row(c);
                    for j in 0..layer.kernel_len {
                        let shift = j as isize - half;
                        let Some((lo, hi)) = valid_range(shift, len) else {
                            continue;
                        };
                        let s_lo = (lo as isize + shift) as usize;
                        let s_hi = (hi as isize + shift) as usize;
                        let gw: f64 = d[lo..hi]
                            .iter()
                            .zip(&x[s_lo..s_hi])
                            .map(|(a, b)| a * b)
                            .sum();
                        g.weights[(o * layer.in_ch + c) * layer.kernel_len + j] = gw;
                        if need_input_grad {
                            let w = layer.weight(o, c, j) as f64;
                            let drow = din.row_mut(c);
                            for (acc, &dv) in drow[s_lo..s_hi].iter_mut().zip(&d[lo..hi]) {
                                *acc += w * dv;
                            }
                        }
                    }
                }
            }
            if need_input_grad {
                // input of this layer is the ReLU output of the previous one
                for (dv, &xv) in din.data.iter_mut().zip(&input.data) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                dout = din;
            }
        }
        Ok(grads)
    }

    /// Per-sample argmax of the logits; exact ties go to background.
    pub fn predict_mask(&self, segment: &[f32]) -> Result<BinaryMask> {
        Ok(logits_to_mask(&self.forward(segment)?))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Parameters flattened per layer as weights then biases.
    pub fn flatten_params(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    /// Mutable parameter slices in the order used by [`CnnModel::flatten_params`].
    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `MAGIC | u32 LE header length | JSON header | f32 LE parameters`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    kernel_len: l.kernel_len,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.flatten_params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 4 {
            return Err(Error::Truncated);
        }
        let header_len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        let rest = &rest[4..];
        if rest.len() < header_len {
            return Err(Error::Truncated);
        }
        let header: ModelHeader = serde_json::from_slice(&rest[..header_len])?;
        header.config.validate()?;
        let expected: Vec<(usize, usize, usize)> = header.config.layer_shapes();
        let declared: Vec<(usize, usize, usize)> = header
            .layers
            .iter()
            .map(|l| (l.in_ch, l.out_ch, l.kernel_len))
            .collect();
        if expected != declared {
            return Err(Error::ShapeMismatch(format!(
                "config depth {} implies {} layers, header lists {}",
                header.config.depth,
                expected.len(),
                declared.len()
            )));
        }

        let mut payload = &rest[header_len..];
        let mut read = |n: usize| -> Result<Vec<f32>> {
            if payload.len() < 4 * n {
                return Err(Error::Truncated);
            }
            let (head, tail) = payload.split_at(4 * n);
            payload = tail;
            Ok(head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mut layers = Vec::with_capacity(declared.len());
        for (i, o, k) in declared {
            let weights = read(o * i * k)?;
            let bias = read(o)?;
            layers.push(ConvLayer {
                in_ch: i,
                out_ch: o,
                kernel_len: k,
                weights,
                bias,
            });
        }
        if !payload.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes after the last layer",
                payload.len()
            )));
        }
        Ok(Self {
            config: header.config,
            layers,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    in_ch: usize,
    out_ch: usize,
    kernel_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    layers: Vec<LayerShape>,
}

pub fn init_model(config: ModelConfig) -> Result<CnnModel> {
    CnnModel::init(config)
}

pub fn logits_to_mask(logits: &LogitPlane) -> BinaryMask {
    BinaryMask {
        values: logits
            .background()
            .iter()
            .zip(logits.qrs())
            .map(|(b, q)| u8::from(q > b))
            .collect(),
    }
}

/// Mean two-class cross-entropy over the first `valid_len` samples and its
/// gradient with respect to the logits (zero beyond `valid_len`).
pub fn softmax_cross_entropy(
    logits: &LogitPlane,
    mask: &BinaryMask,
    valid_len: usize,
) -> Result<(f64, FeatureMap)> {
    if valid_len == 0 {
        return Err(Error::InvalidParameter(
            "valid length must be positive".into(),
        ));
    }
    if mask.len() < valid_len || logits.len() < valid_len {
        return Err(Error::ShapeMismatch(format!(
            "valid length {valid_len} exceeds mask {} or logits {}",
            mask.len(),
            logits.len()
        )));
    }
    let len = logits.len();
    let inv = 1.0 / valid_len as f64;
    let mut grad = FeatureMap::zeros(2, len);
    let mut loss = 0.0;
    let (bg, qrs) = (logits.background(), logits.qrs());
    for t in 0..valid_len {
        let m = bg[t].max(qrs[t]);
        let e0 = (bg[t] - m).exp();
        let e1 = (qrs[t] - m).exp();
        let z = e0 + e1;
        let log_z = z.ln() + m;
        let (p0, p1) = (e0 / z, e1 / z);
        let label = mask.values[t];
        loss += log_z - if label == 1 { qrs[t] } else { bg[t] };
        grad.data[t] = (p0 - f64::from(label == 0)) * inv;
        grad.data[len + t] = (p1 - f64::from(label == 1)) * inv;
    }
    Ok((loss * inv, grad))
}

pub fn count_params(model: &CnnModel) -> u64 {
    model.param_count() as u64
}

/// Multiply-accumulates for one pass over `input_len` samples.
pub fn count_macs(model: &CnnModel, input_len: usize) -> u64 {
    model
        .layers
        .iter()
        .map(|l| (input_len * l.out_ch * l.in_ch * l.kernel_len) as u64)
        .sum()
}
