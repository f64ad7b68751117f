//! A small convolutional classifier with hand-written backpropagation.
//!
//! Reference architecture (every size configurable): the 256x256x3 sample
//! is mean-pooled 4x to 3x64x64 and scaled to [0, 1], then
//! conv 8@3x3/2 + ReLU, conv 16@3x3/2 + ReLU, global average pooling,
//! a fully-connected layer to K logits and a softmax. Convolutions use no
//! padding.
//!
//! All weights live in one flat vector in declaration order:
//! conv1 weights `[f][c][ky][kx]`, conv1 biases, conv2 weights, conv2
//! biases, fc weights `[k][j]`, fc biases.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;
use crate::sample::{Sample, CHANNELS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifierError {
    #[error("invalid architecture: {0}")]
    InvalidArch(&'static str),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Side of the network input after pooling.
    pub input_size: usize,
    /// Mean-pool factor applied to the sample canvas.
    pub pool: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_channels: CHANNELS,
            input_size: 64,
            pool: 4,
            conv1_filters: 8,
            conv2_filters: 16,
            kernel: 3,
            stride: 2,
            classes: crate::class::NUM_CLASSES,
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    if size < kernel {
        0
    } else {
        (size - kernel) / stride + 1
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub len: usize,
    pub out1: usize,
    pub out2: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.input_channels == 0 || self.conv1_filters == 0 || self.conv2_filters == 0 || self.classes < 2 {
            return Err(ClassifierError::InvalidArch("input_channels, conv1_filters, conv2_filters must be positive and classes >= 2"));
        }
        if self.kernel == 0 || self.stride == 0 || self.pool == 0 {
            return Err(ClassifierError::InvalidArch("kernel, stride and pool must be positive"));
        }
        let o1 = conv_out(self.input_size, self.kernel, self.stride);
        if o1 == 0 || conv_out(o1, self.kernel, self.stride) == 0 {
            return Err(ClassifierError::InvalidArch("input_size too small for two convolutions"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let k2 = self.kernel * self.kernel;
        let out1 = conv_out(self.input_size, self.kernel, self.stride);
        let out2 = conv_out(out1, self.kernel, self.stride);
        let w1 = 0;
        let b1 = w1 + self.conv1_filters * self.input_channels * k2;
        let w2 = b1 + self.conv1_filters;
        let b2 = w2 + self.conv2_filters * self.conv1_filters * k2;
        let w3 = b2 + self.conv2_filters;
        let b3 = w3 + self.classes * self.conv2_filters;
        let len = b3 + self.classes;
        Layout { w1, b1, w2, b2, w3, b3, len, out1, out2 }
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_size * self.input_size
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub arch: ArchConfig,
    pub values: Vec<f64>,
}

impl ClassifierParams {
    /// Glorot-uniform weights from a seeded generator; zero biases.
    pub fn init(seed: u64, arch: &ArchConfig) -> Result<Self, ClassifierError> {
        arch.validate()?;
        let l = arch.layout();
        let k2 = arch.kernel * arch.kernel;
        let mut values = vec![0.0; l.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = [
            (l.w1, l.b1, arch.input_channels * k2, arch.conv1_filters * k2),
            (l.w2, l.b2, arch.conv1_filters * k2, arch.conv2_filters * k2),
            (l.w3, l.b3, arch.conv2_filters, arch.classes),
        ];
        for (start, end, fan_in, fan_out) in blocks {
            let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            for v in &mut values[start..end] {
                *v = rng.gen_range(-a..a);
            }
        }
        Ok(Self { arch: arch.clone(), values })
    }

    pub fn zeros(arch: &ArchConfig) -> Result<Self, ClassifierError> {
        arch.validate()?;
        Ok(Self { arch: arch.clone(), values: vec![0.0; arch.param_count()] })
    }

    pub fn from_values(arch: &ArchConfig, values: Vec<f64>) -> Result<Self, ClassifierError> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(ClassifierError::ShapeMismatch { expected, got: values.len() });
        }
        Ok(Self { arch: arch.clone(), values })
    }

    pub fn layout(&self) -> Layout {
        self.arch.layout()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Class probabilities of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities(pub Vec<f64>);

impl Probabilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest probability (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = k;
            }
        }
        best
    }
}

/// Softmax with the max logit subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| math::exp(z - m)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(z)))` without overflow.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + math::ln(logits.iter().map(|z| math::exp(z - m)).sum::<f64>())
}

/// Pools a sample canvas into a network input scaled to [0, 1].
pub fn prepare_input(sample: &Sample, arch: &ArchConfig) -> Result<Vec<f64>, ClassifierError> {
    let expected = arch.input_size * arch.pool;
    if sample.canvas != expected || arch.input_channels != CHANNELS {
        return Err(ClassifierError::ShapeMismatch { expected: expected * expected * CHANNELS, got: sample.channels.len() });
    }
    let s = arch.input_size;
    let p = arch.pool;
    let norm = 1.0 / (255.0 * (p * p) as f64);
    let mut out = vec![0.0; CHANNELS * s * s];
    for c in 0..CHANNELS {
        let plane = sample.channel(c);
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0u32;
                for dy in 0..p {
                    let row = (y * p + dy) * sample.canvas + x * p;
                    acc += plane[row..row + p].iter().map(|&v| v as u32).sum::<u32>();
                }
                out[(c * s + y) * s + x] = acc as f64 * norm;
            }
        }
    }
    Ok(out)
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Probabilities,
}

fn conv_forward(
    input: &[f64],
    in_ch: usize,
    in_size: usize,
    weights: &[f64],
    biases: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    out_size: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_ch * out_size * out_size];
    for f in 0..out_ch {
        for oy in 0..out_size {
            for ox in 0..out_size {
                let mut acc = biases[f];
                for c in 0..in_ch {
                    for ky in 0..kernel {
                        let in_row = (c * in_size + oy * stride + ky) * in_size + ox * stride;
                        let w_row = ((f * in_ch + c) * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            acc += weights[w_row + kx] * input[in_row + kx];
                        }
                    }
                }
                out[(f * out_size + oy) * out_size + ox] = acc;
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients and, when `grad_input` is given,
/// the gradient with respect to the layer input.
fn conv_backward(
    input: &[f64],
    in_ch: usize,
    in_size: usize,
    weights: &[f64],
    grad_out: &[f64],
    out_ch: usize,
    kernel: usize,
    stride: usize,
    out_size: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    for f in 0..out_ch {
        for oy in 0..out_size {
            for ox in 0..out_size {
                let g = grad_out[(f * out_size + oy) * out_size + ox];
                if g == 0.0 {
                    continue;
                }
                grad_b[f] += g;
                for c in 0..in_ch {
                    for ky in 0..kernel {
                        let in_row = (c * in_size + oy * stride + ky) * in_size + ox * stride;
                        let w_row = ((f * in_ch + c) * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            grad_w[w_row + kx] += g * input[in_row + kx];
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            for kx in 0..kernel {
                                gi[in_row + kx] += g * weights[w_row + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Forward pass keeping what [`backward`] needs.
pub fn forward_cached(params: &ClassifierParams, input: &[f64]) -> Result<ForwardCache, ClassifierError> {
    let a = &params.arch;
    if input.len() != a.input_len() {
        return Err(ClassifierError::ShapeMismatch { expected: a.input_len(), got: input.len() });
    }
    if params.values.len() != a.param_count() {
        return Err(ClassifierError::ShapeMismatch { expected: a.param_count(), got: params.values.len() });
    }
    let l = a.layout();
    let v = &params.values;
    let z1 = conv_forward(input, a.input_channels, a.input_size, &v[l.w1..l.b1], &v[l.b1..l.w2], a.conv1_filters, a.kernel, a.stride, l.out1);
    let a1 = relu(&z1);
    let z2 = conv_forward(&a1, a.conv1_filters, l.out1, &v[l.w2..l.b2], &v[l.b2..l.w3], a.conv2_filters, a.kernel, a.stride, l.out2);
    let area = (l.out2 * l.out2) as f64;
    let pooled: Vec<f64> = z2
        .chunks(l.out2 * l.out2)
        .map(|ch| ch.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).sum::<f64>() / area)
        .collect();
    let logits: Vec<f64> = (0..a.classes)
        .map(|k| {
            let w = &v[l.w3 + k * a.conv2_filters..l.w3 + (k + 1) * a.conv2_filters];
            v[l.b3 + k] + w.iter().zip(&pooled).map(|(w, g)| w * g).sum::<f64>()
        })
        .collect();
    let probs = Probabilities(softmax(&logits));
    Ok(ForwardCache { input: input.to_vec(), z1, a1, z2, pooled, logits, probs })
}

pub fn forward(params: &ClassifierParams, input: &[f64]) -> Result<Probabilities, ClassifierError> {
    forward_cached(params, input).map(|c| c.probs)
}

/// Gradient with respect to the logits given a gradient with respect to
/// the probabilities: `dz_k = p_k (g_k - sum_j g_j p_j)`.
pub fn logits_grad_from_probs(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}

/// Adds the parameter gradient of a scalar loss to `grads`, given the
/// loss gradient with respect to this input's logits.
pub fn backward(
    params: &ClassifierParams,
    cache: &ForwardCache,
    grad_logits: &[f64],
    grads: &mut [f64],
) -> Result<(), ClassifierError> {
    let a = &params.arch;
    let l = a.layout();
    if grad_logits.len() != a.classes {
        return Err(ClassifierError::ShapeMismatch { expected: a.classes, got: grad_logits.len() });
    }
    if grads.len() != l.len || cache.input.len() != a.input_len() || cache.pooled.len() != a.conv2_filters {
        return Err(ClassifierError::ShapeMismatch { expected: l.len, got: grads.len() });
    }
    if grad_logits.iter().all(|g| *g == 0.0) {
        return Ok(());
    }
    let v = &params.values;

    // Fully connected.
    let mut grad_pooled = vec![0.0; a.conv2_filters];
    for k in 0..a.classes {
        let g = grad_logits[k];
        grads[l.b3 + k] += g;
        for j in 0..a.conv2_filters {
            grads[l.w3 + k * a.conv2_filters + j] += g * cache.pooled[j];
            grad_pooled[j] += g * v[l.w3 + k * a.conv2_filters + j];
        }
    }

    // Global average pool + ReLU.
    let area = l.out2 * l.out2;
    let mut grad_z2 = vec![0.0; a.conv2_filters * area];
    for f in 0..a.conv2_filters {
        let g = grad_pooled[f] / area as f64;
        for i in 0..area {
            if cache.z2[f * area + i] > 0.0 {
                grad_z2[f * area + i] = g;
            }
        }
    }

    let mut grad_a1 = vec![0.0; cache.a1.len()];
    {
        let (head, tail) = grads.split_at_mut(l.b2);
        conv_backward(
            &cache.a1,
            a.conv1_filters,
            l.out1,
            &v[l.w2..l.b2],
            &grad_z2,
            a.conv2_filters,
            a.kernel,
            a.stride,
            l.out2,
            &mut head[l.w2..l.b2],
            &mut tail[..a.conv2_filters],
            Some(&mut grad_a1),
        );
    }
    for (g, z) in grad_a1.iter_mut().zip(&cache.z1) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let (head, tail) = grads.split_at_mut(l.b1);
    conv_backward(
        &cache.input,
        a.input_channels,
        a.input_size,
        &v[l.w1..l.b1],
        &grad_a1,
        a.conv1_filters,
        a.kernel,
        a.stride,
        l.out1,
        &mut head[l.w1..l.b1],
        &mut tail[..a.conv1_filters],
        None,
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig { input_size: 7, pool: 1, conv1_filters: 2, conv2_filters: 3, classes: 4, ..ArchConfig::default() }
    }

    #[test]
    fn layout_of_reference_arch() {
        let l = ArchConfig::default().layout();
        assert_eq!((l.out1, l.out2), (31, 15));
        assert_eq!(l.len, 8 * 27 + 8 + 16 * 72 + 16 + 7 * 16 + 7);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ClassifierParams::init(3, &ArchConfig::default()).unwrap();
        let b = ClassifierParams::init(3, &ArchConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ClassifierParams::init(4, &ArchConfig::default()).unwrap());
        let l = a.layout();
        let bound = libm::sqrt(6.0 / (27.0 + 72.0));
        assert!(a.values[l.w1..l.b1].iter().all(|v| v.abs() < bound));
        assert!(a.values[l.b1..l.w2].iter().all(|v| *v == 0.0));
        assert!(a.values[l.b3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_arch() {
        let arch = ArchConfig { input_size: 4, ..ArchConfig::default() };
        assert!(matches!(ClassifierParams::init(0, &arch), Err(ClassifierError::InvalidArch(_))));
        let arch = ArchConfig { classes: 1, ..ArchConfig::default() };
        assert!(ClassifierParams::zeros(&arch).is_err());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = ClassifierParams::zeros(&ArchConfig::default()).unwrap();
        let x = vec![0.7; ArchConfig::default().input_len()];
        let probs = forward(&p, &x).unwrap();
        for v in probs.as_slice() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_logits() {
        let arch = ArchConfig::default();
        let mut p = ClassifierParams::zeros(&arch).unwrap();
        let b3 = p.layout().b3;
        p.values[b3] = 1.0;
        let probs = forward(&p, &vec![0.0; arch.input_len()]).unwrap();
        let e = core::f64::consts::E;
        assert!((probs.0[0] - e / (e + 6.0)).abs() < 1e-12);
        assert!((probs.0[0] - 0.3118).abs() < 1e-4);
        assert_eq!(probs.argmax(), 0);
    }

    #[test]
    fn shape_errors() {
        let p = ClassifierParams::zeros(&tiny()).unwrap();
        assert!(matches!(forward(&p, &[0.0; 3]), Err(ClassifierError::ShapeMismatch { .. })));
        let cache = forward_cached(&p, &vec![0.1; tiny().input_len()]).unwrap();
        let mut g = vec![0.0; 3];
        assert!(backward(&p, &cache, &[0.0; 4], &mut g).is_err());
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && p[2] >= 0.0);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + core::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = ClassifierParams::init(1, &tiny()).unwrap();
        let cache = forward_cached(&p, &vec![0.3; tiny().input_len()]).unwrap();
        let mut g = vec![0.0; p.values.len()];
        backward(&p, &cache, &[0.0; 4], &mut g).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pooling_averages_blocks() {
        let arch = ArchConfig { input_size: 8, pool: 2, ..ArchConfig::default() };
        let mut s = Sample { sample_id: 0, segment_id: 0, frame_index: 0, canvas: 16, channels: vec![0; 3 * 256], label: None };
        s.channels[0] = 255;
        s.channels[1] = 255;
        s.channels[2 * 256 + 17] = 51;
        let x = prepare_input(&s, &arch).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15);
        assert!((x[2 * 64] - 0.05).abs() < 1e-15);
        assert!(prepare_input(&s, &ArchConfig::default()).is_err());
    }
}
