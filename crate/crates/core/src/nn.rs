//! Minimal neural-network kernel for the two evaluation models.
//!
//! Exactly two architectures exist and both are hand-rolled: a small CNN
//! for 28×28 grayscale digits and a three-layer MLP for 561-feature
//! activity windows. Forward, backward, and SGD-with-momentum training are
//! written directly over `f64` slices — no autograd, no BLAS — which keeps
//! the numerics bit-for-bit reproducible for a given seed: sample order,
//! dropout masks, and reduction order are all fixed functions of the seed,
//! and parallel gradient evaluation collects into sample order before any
//! floating-point accumulation.
//!
//! The canonical weight serialization defined here is the preimage of the
//! model digest that proofs bind to, so its layout (arch tag byte, then each
//! layer's weights and bias as big-endian binary64) is a wire contract.

use crate::dataio::Sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Learning rate for the one-epoch training pass.
pub const LEARNING_RATE: f64 = 0.01;

/// Momentum factor for the one-epoch training pass.
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor declares {declared} elements but holds {got}")]
    LengthMismatch { declared: usize, got: usize },
    #[error("tensor contains a non-finite value at index {0}")]
    NotFinite(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelIndex { label: usize, classes: usize },
    #[error("empty shard has no mean loss")]
    EmptyShard,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("unknown architecture tag {0}")]
    UnknownArchTag(u8),
    #[error("serialized model is {got} bytes, expected {expected}")]
    SerializedLength { expected: usize, got: usize },
}

/// Dense row-major array of finite doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/length agreement and finiteness
    /// invariants.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor, NnError> {
        let declared: usize = shape.iter().product();
        if declared != values.len() {
            return Err(NnError::LengthMismatch {
                declared,
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NotFinite(bad));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The two model families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// Conv(1→16, k5, p2) → ReLU → MaxPool2 → Conv(16→32, k5, p2) → ReLU →
    /// MaxPool2 → Dropout(0.5) → FC(1568→10).
    MnistCnn,
    /// FC(561→128) → ReLU → Dropout(0.5) → FC(128→64) → ReLU →
    /// Dropout(0.3) → FC(64→6).
    HarMlp,
}

impl Arch {
    /// First byte of the canonical serialization.
    pub fn tag_byte(self) -> u8 {
        match self {
            Arch::MnistCnn => 1,
            Arch::HarMlp => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Arch::MnistCnn => 10,
            Arch::HarMlp => 6,
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Arch::MnistCnn => vec![1, 28, 28],
            Arch::HarMlp => vec![561],
        }
    }

    /// Weight-tensor shape and bias length per trainable layer, in forward
    /// order. Row-major dense weights are (outputs, inputs); convolution
    /// weights are (out_channels, in_channels, k, k).
    pub fn layer_shapes(self) -> Vec<(Vec<usize>, usize)> {
        match self {
            Arch::MnistCnn => vec![
                (vec![16, 1, 5, 5], 16),
                (vec![32, 16, 5, 5], 32),
                (vec![10, 32 * 7 * 7], 10),
            ],
            Arch::HarMlp => vec![
                (vec![128, 561], 128),
                (vec![64, 128], 64),
                (vec![6, 64], 6),
            ],
        }
    }
}

/// One trainable layer: weights plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// A complete set of weights for one architecture. Construction validates
/// every layer shape, so any `ModelParams` in circulation is well-formed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn from_layers(arch: Arch, layers: Vec<Layer>) -> Result<ModelParams, NnError> {
        let expected = arch.layer_shapes();
        if layers.len() != expected.len() {
            return Err(NnError::Shape {
                expected: vec![expected.len()],
                got: vec![layers.len()],
            });
        }
        for (layer, (weight_shape, bias_len)) in layers.iter().zip(&expected) {
            if layer.weights.shape() != weight_shape.as_slice() {
                return Err(NnError::Shape {
                    expected: weight_shape.clone(),
                    got: layer.weights.shape().to_vec(),
                });
            }
            if layer.bias.shape() != [*bias_len] {
                return Err(NnError::Shape {
                    expected: vec![*bias_len],
                    got: layer.bias.shape().to_vec(),
                });
            }
        }
        Ok(ModelParams { arch, layers })
    }

    /// All-zero weights and biases. Produces uniform logits for any input,
    /// which pins the mean loss to ln(num_classes).
    pub fn zeros(arch: Arch) -> ModelParams {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(weight_shape, bias_len)| Layer {
                weights: Tensor::zeros(weight_shape),
                bias: Tensor::zeros(vec![bias_len]),
            })
            .collect();
        ModelParams { arch, layers }
    }

    /// He-uniform initialization: weights drawn from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases zero. Deterministic per
    /// seed; draw order is layer order, then row-major weight order.
    pub fn he_init(arch: Arch, seed: u64) -> ModelParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(weight_shape, bias_len)| {
                let fan_in: usize = weight_shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                let count: usize = weight_shape.iter().product();
                let values: Vec<f64> =
                    (0..count).map(|_| rng.gen_range(-limit..limit)).collect();
                Layer {
                    weights: Tensor::new(weight_shape, values)
                        .expect("generated values are finite and sized to shape"),
                    bias: Tensor::zeros(vec![bias_len]),
                }
            })
            .collect();
        ModelParams { arch, layers }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// SHA-256 digest of the canonical weight serialization, with the 128-bit
/// limb split used as circuit public inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelDigest {
    bytes: [u8; 32],
}

impl ModelDigest {
    pub fn from_bytes(bytes: [u8; 32]) -> ModelDigest {
        ModelDigest { bytes }
    }

    pub fn bytes(&self) -> &[u8; 32] {
        &self.bytes
    }

    /// Big-endian integer over digest bytes 0..16 (the most significant
    /// half).
    pub fn hi_limb(&self) -> u128 {
        u128::from_be_bytes(self.bytes[..16].try_into().unwrap())
    }

    /// Big-endian integer over digest bytes 16..32.
    pub fn lo_limb(&self) -> u128 {
        u128::from_be_bytes(self.bytes[16..].try_into().unwrap())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.bytes)
    }
}

/// Fixed byte layout over which models are hashed: the architecture tag
/// byte, then for each layer (in forward order) every weight followed by
/// every bias value as IEEE-754 binary64 big-endian.
pub fn canonical_serialize(params: &ModelParams) -> Vec<u8> {
    let total_values: usize = params
        .layers
        .iter()
        .map(|l| l.weights.len() + l.bias.len())
        .sum();
    let mut out = Vec::with_capacity(1 + 8 * total_values);
    out.push(params.arch.tag_byte());
    for layer in &params.layers {
        for value in layer.weights.values() {
            out.extend_from_slice(&value.to_be_bytes());
        }
        for value in layer.bias.values() {
            out.extend_from_slice(&value.to_be_bytes());
        }
    }
    out
}

/// Inverse of [`canonical_serialize`]: rebuilds a model from the tag byte
/// and big-endian binary64 values, rejecting unknown tags, length
/// mismatches, and non-finite values.
pub fn canonical_deserialize(bytes: &[u8]) -> Result<ModelParams, NnError> {
    let (&tag, mut rest) = bytes.split_first().ok_or(NnError::SerializedLength {
        expected: 1,
        got: 0,
    })?;
    let arch = match tag {
        1 => Arch::MnistCnn,
        2 => Arch::HarMlp,
        other => return Err(NnError::UnknownArchTag(other)),
    };
    let shapes = arch.layer_shapes();
    let total_values: usize = shapes
        .iter()
        .map(|(w, b)| w.iter().product::<usize>() + b)
        .sum();
    if rest.len() != 8 * total_values {
        return Err(NnError::SerializedLength {
            expected: 1 + 8 * total_values,
            got: bytes.len(),
        });
    }
    let mut take = |count: usize| -> Result<Vec<f64>, NnError> {
        let (chunk, remaining) = rest.split_at(8 * count);
        rest = remaining;
        chunk
            .chunks_exact(8)
            .map(|raw| {
                let value = f64::from_be_bytes(raw.try_into().unwrap());
                if value.is_finite() {
                    Ok(value)
                } else {
                    Err(NnError::NotFinite(0))
                }
            })
            .collect()
    };
    let mut layers = Vec::with_capacity(shapes.len());
    for (weight_shape, bias_len) in shapes {
        let weight_count = weight_shape.iter().product();
        let weights = Tensor::new(weight_shape, take(weight_count)?)?;
        let bias = Tensor::new(vec![bias_len], take(bias_len)?)?;
        layers.push(Layer { weights, bias });
    }
    ModelParams::from_layers(arch, layers)
}

/// SHA-256 of [`canonical_serialize`].
pub fn model_hash(params: &ModelParams) -> ModelDigest {
    let mut hasher = Sha256::new();
    hasher.update(canonical_serialize(params));
    ModelDigest {
        bytes: hasher.finalize().into(),
    }
}

// ---------------------------------------------------------------------------
// Kernels. All operate on raw slices; shapes are the caller's contract.
// ---------------------------------------------------------------------------

/// Stride-1 2D convolution with zero padding; output spatial size equals
/// input spatial size (callers only use k=5/pad=2 and k=3/pad=1).
fn conv2d_forward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_c: usize,
    k: usize,
    pad: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    for oc in 0..out_c {
        let out_plane = &mut out[oc * h * w..(oc + 1) * h * w];
        out_plane.fill(bias[oc]);
        for ic in 0..in_c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for kx in 0..k {
                    let weight = weights[((oc * in_c + ic) * k + ky) * k + kx];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    for y in y_lo..y_hi {
                        // x >= x_lo keeps x + kx - pad in range.
                        let in_row = (y + ky - pad) * w;
                        let out_row = y * w;
                        for x in x_lo..x_hi {
                            out_plane[out_row + x] += weight * in_plane[in_row + x + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`] with respect to weights, bias, and
/// (optionally) the input.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_c: usize,
    k: usize,
    pad: usize,
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    for oc in 0..out_c {
        let dout_plane = &dout[oc * h * w..(oc + 1) * h * w];
        dbias[oc] += dout_plane.iter().sum::<f64>();
        for ic in 0..in_c {
            let in_plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let y_lo = pad.saturating_sub(ky);
                let y_hi = (h + pad - ky).min(h);
                for kx in 0..k {
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    let mut grad = 0.0;
                    for y in y_lo..y_hi {
                        let in_row = (y + ky - pad) * w;
                        let out_row = y * w;
                        for x in x_lo..x_hi {
                            grad += dout_plane[out_row + x] * in_plane[in_row + x + kx - pad];
                        }
                    }
                    dweights[((oc * in_c + ic) * k + ky) * k + kx] += grad;
                    if let Some(dx) = dinput.as_deref_mut() {
                        let weight = weights[((oc * in_c + ic) * k + ky) * k + kx];
                        let dx_plane = &mut dx[ic * h * w..(ic + 1) * h * w];
                        for y in y_lo..y_hi {
                            let in_row = (y + ky - pad) * w;
                            let out_row = y * w;
                            for x in x_lo..x_hi {
                                dx_plane[in_row + x + kx - pad] +=
                                    weight * dout_plane[out_row + x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling with stride 2. Records the winning input index per
/// output cell (first occurrence wins on ties) for gradient routing.
fn maxpool2_forward(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let oh = h / 2;
    let ow = w / 2;
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let base = c * h * w + 2 * y * w + 2 * x;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let out_idx = c * oh * ow + y * ow + x;
                out[out_idx] = input[best];
                argmax[out_idx] = best;
            }
        }
    }
}

fn maxpool2_backward(argmax: &[usize], dout: &[f64], dinput: &mut [f64]) {
    for (out_idx, &src) in argmax.iter().enumerate() {
        dinput[src] += dout[out_idx];
    }
}

/// Row-major dense layer: `out = W·x + b` with W of shape (outputs, inputs).
fn dense_forward(
    weights: &[f64],
    outputs: usize,
    inputs: usize,
    x: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    for o in 0..outputs {
        let row = &weights[o * inputs..(o + 1) * inputs];
        let mut acc = bias[o];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out[o] = acc;
    }
}

fn dense_backward(
    weights: &[f64],
    outputs: usize,
    inputs: usize,
    x: &[f64],
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    for o in 0..outputs {
        dbias[o] += dout[o];
        let drow = &mut dweights[o * inputs..(o + 1) * inputs];
        for (dw, xv) in drow.iter_mut().zip(x) {
            *dw += dout[o] * xv;
        }
    }
    if let Some(dx) = dinput {
        for o in 0..outputs {
            let row = &weights[o * inputs..(o + 1) * inputs];
            for (d, wv) in dx.iter_mut().zip(row) {
                *d += dout[o] * wv;
            }
        }
    }
}

fn relu_forward(values: &mut [f64]) {
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the pre-activation was not positive.
fn relu_backward(pre_activation: &[f64], grad: &mut [f64]) {
    for (g, z) in grad.iter_mut().zip(pre_activation) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically stable softmax cross-entropy: loss and gradient with respect
/// to the logits.
fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Inverted-dropout mask: kept units scale by 1/(1-rate) so inference needs
/// no rescaling. Only training draws masks.
fn dropout_mask(rng: &mut ChaCha12Rng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------------------
// Public inference and loss operations.
// ---------------------------------------------------------------------------

/// Inference-mode forward pass (dropout disabled). Deterministic: equal
/// params and input give bitwise-equal logits.
pub fn forward(params: &ModelParams, input: &Tensor) -> Result<Tensor, NnError> {
    let expected = params.arch.input_shape();
    if input.shape() != expected.as_slice() {
        return Err(NnError::Shape {
            expected,
            got: input.shape().to_vec(),
        });
    }
    let logits = match params.arch {
        Arch::MnistCnn => mnist_logits(params, input.values()),
        Arch::HarMlp => har_logits(params, input.values()),
    };
    Tensor::new(vec![params.arch.num_classes()], logits)
}

fn mnist_logits(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let l = params.layers();
    let mut z1 = vec![0.0; 16 * 28 * 28];
    conv2d_forward(x, 1, 28, 28, l[0].weights.values(), 16, 5, 2, l[0].bias.values(), &mut z1);
    relu_forward(&mut z1);
    let mut p1 = vec![0.0; 16 * 14 * 14];
    let mut idx1 = vec![0usize; p1.len()];
    maxpool2_forward(&z1, 16, 28, 28, &mut p1, &mut idx1);

    let mut z2 = vec![0.0; 32 * 14 * 14];
    conv2d_forward(&p1, 16, 14, 14, l[1].weights.values(), 32, 5, 2, l[1].bias.values(), &mut z2);
    relu_forward(&mut z2);
    let mut p2 = vec![0.0; 32 * 7 * 7];
    let mut idx2 = vec![0usize; p2.len()];
    maxpool2_forward(&z2, 32, 14, 14, &mut p2, &mut idx2);

    let mut logits = vec![0.0; 10];
    dense_forward(l[2].weights.values(), 10, 32 * 7 * 7, &p2, l[2].bias.values(), &mut logits);
    logits
}

fn har_logits(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let l = params.layers();
    let mut a1 = vec![0.0; 128];
    dense_forward(l[0].weights.values(), 128, 561, x, l[0].bias.values(), &mut a1);
    relu_forward(&mut a1);
    let mut a2 = vec![0.0; 64];
    dense_forward(l[1].weights.values(), 64, 128, &a1, l[1].bias.values(), &mut a2);
    relu_forward(&mut a2);
    let mut logits = vec![0.0; 6];
    dense_forward(l[2].weights.values(), 6, 64, &a2, l[2].bias.values(), &mut logits);
    logits
}

/// `-log softmax(logits)[label]` with max-subtraction stabilization.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64, NnError> {
    if label >= logits.len() {
        return Err(NnError::LabelIndex {
            label,
            classes: logits.len(),
        });
    }
    Ok(softmax_cross_entropy(logits.values(), label).0)
}

/// Mean cross-entropy over the whole shard — the client's local loss.
///
/// `batch_size` only chunks the work for parallel evaluation; the value is
/// the arithmetic mean over all samples in shard order, so it is exactly
/// independent of the batch partitioning.
pub fn local_loss(
    params: &ModelParams,
    shard: &[Sample],
    batch_size: usize,
) -> Result<f64, NnError> {
    if shard.is_empty() {
        return Err(NnError::EmptyShard);
    }
    if batch_size == 0 {
        return Err(NnError::ZeroBatch);
    }
    let losses: Vec<f64> = shard
        .par_chunks(batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|sample| {
                    let logits = forward(params, &sample.features)?;
                    cross_entropy(&logits, sample.label)
                })
                .collect::<Result<Vec<f64>, NnError>>()
        })
        .collect::<Result<Vec<Vec<f64>>, NnError>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// Per-layer gradient accumulator shaped like the model: one
/// (weight-gradients, bias-gradients) pair per layer, flattened in the
/// layer's canonical order.
pub struct Grads {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Grads {
    /// Per-layer (weight, bias) gradients, in model layer order.
    pub fn layers(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.layers
    }

    fn zeros_like(params: &ModelParams) -> Grads {
        Grads {
            layers: params
                .layers()
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    fn accumulate(&mut self, other: &Grads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (dst, src) in w.iter_mut().zip(ow) {
                *dst += src;
            }
            for (dst, src) in b.iter_mut().zip(ob) {
                *dst += src;
            }
        }
    }
}

/// Derives the dropout seed for one sample position within an epoch. Masks
/// depend only on (epoch seed, position), never on thread scheduling.
fn mask_seed(seed: u64, position: u64) -> u64 {
    // SplitMix64-style mixing: cheap and well distributed.
    let mut h = seed ^ position.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn mnist_sample_grad(
    params: &ModelParams,
    sample: &Sample,
    dropout_seed: Option<u64>,
) -> (f64, Grads) {
    let l = params.layers();
    let x = sample.features.values();

    let mut z1 = vec![0.0; 16 * 28 * 28];
    conv2d_forward(x, 1, 28, 28, l[0].weights.values(), 16, 5, 2, l[0].bias.values(), &mut z1);
    let mut a1 = z1.clone();
    relu_forward(&mut a1);
    let mut p1 = vec![0.0; 16 * 14 * 14];
    let mut idx1 = vec![0usize; p1.len()];
    maxpool2_forward(&a1, 16, 28, 28, &mut p1, &mut idx1);

    let mut z2 = vec![0.0; 32 * 14 * 14];
    conv2d_forward(&p1, 16, 14, 14, l[1].weights.values(), 32, 5, 2, l[1].bias.values(), &mut z2);
    let mut a2 = z2.clone();
    relu_forward(&mut a2);
    let mut p2 = vec![0.0; 32 * 7 * 7];
    let mut idx2 = vec![0usize; p2.len()];
    maxpool2_forward(&a2, 32, 14, 14, &mut p2, &mut idx2);

    let mask = match dropout_seed {
        Some(seed) => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            dropout_mask(&mut rng, p2.len(), 0.5)
        }
        None => vec![1.0; p2.len()],
    };
    let dropped: Vec<f64> = p2.iter().zip(&mask).map(|(v, m)| v * m).collect();

    let mut logits = vec![0.0; 10];
    dense_forward(l[2].weights.values(), 10, 1568, &dropped, l[2].bias.values(), &mut logits);
    let (loss, dlogits) = softmax_cross_entropy(&logits, sample.label);

    let mut grads = Grads::zeros_like(params);
    let mut ddropped = vec![0.0; 1568];
    {
        let (dw, db) = &mut grads.layers[2];
        dense_backward(
            l[2].weights.values(),
            10,
            1568,
            &dropped,
            &dlogits,
            dw,
            db,
            Some(&mut ddropped),
        );
    }
    let dp2: Vec<f64> = ddropped.iter().zip(&mask).map(|(d, m)| d * m).collect();

    let mut da2 = vec![0.0; 32 * 14 * 14];
    maxpool2_backward(&idx2, &dp2, &mut da2);
    relu_backward(&z2, &mut da2);

    let mut dp1 = vec![0.0; 16 * 14 * 14];
    {
        let (dw, db) = &mut grads.layers[1];
        conv2d_backward(
            &p1,
            16,
            14,
            14,
            l[1].weights.values(),
            32,
            5,
            2,
            &da2,
            dw,
            db,
            Some(&mut dp1),
        );
    }

    let mut da1 = vec![0.0; 16 * 28 * 28];
    maxpool2_backward(&idx1, &dp1, &mut da1);
    relu_backward(&z1, &mut da1);
    {
        let (dw, db) = &mut grads.layers[0];
        conv2d_backward(
            x,
            1,
            28,
            28,
            l[0].weights.values(),
            16,
            5,
            2,
            &da1,
            dw,
            db,
            None,
        );
    }
    (loss, grads)
}

fn har_sample_grad(
    params: &ModelParams,
    sample: &Sample,
    dropout_seed: Option<u64>,
) -> (f64, Grads) {
    let l = params.layers();
    let x = sample.features.values();
    let mut rng = dropout_seed.map(ChaCha12Rng::seed_from_u64);
    let mut mask_or_ones = |len: usize, rate: f64| match rng.as_mut() {
        Some(rng) => dropout_mask(rng, len, rate),
        None => vec![1.0; len],
    };

    let mut z1 = vec![0.0; 128];
    dense_forward(l[0].weights.values(), 128, 561, x, l[0].bias.values(), &mut z1);
    let mut a1 = z1.clone();
    relu_forward(&mut a1);
    let mask1 = mask_or_ones(128, 0.5);
    let d1: Vec<f64> = a1.iter().zip(&mask1).map(|(v, m)| v * m).collect();

    let mut z2 = vec![0.0; 64];
    dense_forward(l[1].weights.values(), 64, 128, &d1, l[1].bias.values(), &mut z2);
    let mut a2 = z2.clone();
    relu_forward(&mut a2);
    let mask2 = mask_or_ones(64, 0.3);
    let d2: Vec<f64> = a2.iter().zip(&mask2).map(|(v, m)| v * m).collect();

    let mut logits = vec![0.0; 6];
    dense_forward(l[2].weights.values(), 6, 64, &d2, l[2].bias.values(), &mut logits);
    let (loss, dlogits) = softmax_cross_entropy(&logits, sample.label);

    let mut grads = Grads::zeros_like(params);
    let mut dd2 = vec![0.0; 64];
    {
        let (dw, db) = &mut grads.layers[2];
        dense_backward(l[2].weights.values(), 6, 64, &d2, &dlogits, dw, db, Some(&mut dd2));
    }
    let mut da2: Vec<f64> = dd2.iter().zip(&mask2).map(|(d, m)| d * m).collect();
    relu_backward(&z2, &mut da2);

    let mut dd1 = vec![0.0; 128];
    {
        let (dw, db) = &mut grads.layers[1];
        dense_backward(l[1].weights.values(), 64, 128, &d1, &da2, dw, db, Some(&mut dd1));
    }
    let mut da1: Vec<f64> = dd1.iter().zip(&mask1).map(|(d, m)| d * m).collect();
    relu_backward(&z1, &mut da1);
    {
        let (dw, db) = &mut grads.layers[0];
        dense_backward(l[0].weights.values(), 128, 561, x, &da1, dw, db, None);
    }
    (loss, grads)
}

fn sample_grad(params: &ModelParams, sample: &Sample, dropout_seed: Option<u64>) -> (f64, Grads) {
    match params.arch() {
        Arch::MnistCnn => mnist_sample_grad(params, sample, dropout_seed),
        Arch::HarMlp => har_sample_grad(params, sample, dropout_seed),
    }
}

/// Inference-mode loss and gradient for one sample: the exact derivative of
/// [`cross_entropy`]∘[`forward`] with respect to every parameter (dropout
/// disabled, matching [`local_loss`]).
pub fn loss_gradient(params: &ModelParams, sample: &Sample) -> Result<(f64, Grads), NnError> {
    let expected = params.arch().input_shape();
    if sample.features.shape() != expected.as_slice() {
        return Err(NnError::Shape {
            expected,
            got: sample.features.shape().to_vec(),
        });
    }
    if sample.label >= params.arch().num_classes() {
        return Err(NnError::LabelIndex {
            label: sample.label,
            classes: params.arch().num_classes(),
        });
    }
    Ok(sample_grad(params, sample, None))
}

/// SGD hyperparameters for [`train_one_epoch_with`].
#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: LEARNING_RATE,
            momentum: MOMENTUM,
        }
    }
}

/// One epoch of minibatch SGD with momentum and the defaults of
/// [`SgdConfig`]. Deterministic per (params, data, batch_size, seed).
pub fn train_one_epoch(
    params: &ModelParams,
    data: &[Sample],
    batch_size: usize,
    seed: u64,
) -> Result<ModelParams, NnError> {
    train_one_epoch_with(params, data, batch_size, seed, &SgdConfig::default())
}

/// [`train_one_epoch`] with explicit hyperparameters.
///
/// Per-sample gradients within a batch are computed in parallel but summed
/// in sample order, and dropout masks are a pure function of (seed, sample
/// position), so the result is independent of thread scheduling.
pub fn train_one_epoch_with(
    params: &ModelParams,
    data: &[Sample],
    batch_size: usize,
    seed: u64,
    config: &SgdConfig,
) -> Result<ModelParams, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyShard);
    }
    if batch_size == 0 {
        return Err(NnError::ZeroBatch);
    }
    let expected = params.arch.input_shape();
    if let Some(bad) = data
        .iter()
        .find(|s| s.features.shape() != expected.as_slice())
    {
        return Err(NnError::Shape {
            expected,
            got: bad.features.shape().to_vec(),
        });
    }

    let mut model = params.clone();
    let mut velocity = Grads::zeros_like(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);

    for (batch_index, batch) in order.chunks(batch_size).enumerate() {
        let base = (batch_index * batch_size) as u64;
        let results: Vec<(f64, Grads)> = batch
            .par_iter()
            .enumerate()
            .map(|(offset, &sample_index)| {
                sample_grad(
                    &model,
                    &data[sample_index],
                    Some(mask_seed(seed, base + offset as u64)),
                )
            })
            .collect();

        let mut batch_grads = Grads::zeros_like(&model);
        for (_, grads) in &results {
            batch_grads.accumulate(grads);
        }
        let inv = 1.0 / batch.len() as f64;

        for (layer_index, layer) in model.layers.iter_mut().enumerate() {
            let (vw, vb) = &mut velocity.layers[layer_index];
            let (gw, gb) = &batch_grads.layers[layer_index];
            for ((w, v), g) in layer
                .weights
                .values
                .iter_mut()
                .zip(vw.iter_mut())
                .zip(gw)
            {
                *v = config.momentum * *v + g * inv;
                *w -= config.learning_rate * *v;
            }
            for ((b, v), g) in layer.bias.values.iter_mut().zip(vb.iter_mut()).zip(gb) {
                *v = config.momentum * *v + g * inv;
                *b -= config.learning_rate * *v;
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Sample;
    use proptest::prelude::*;
    // proptest's prelude also globs a `Rng`; name ours explicitly.
    use rand::Rng;

    fn mnist_sample(seed: u64, label: usize) -> Sample {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..784).map(|_| rng.gen_range(0.0..1.0)).collect();
        Sample {
            features: Tensor::new(vec![1, 28, 28], values).unwrap(),
            label,
        }
    }

    fn har_sample(seed: u64, label: usize) -> Sample {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..561).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Sample {
            features: Tensor::new(vec![561], values).unwrap(),
            label,
        }
    }

    #[test]
    fn tensor_construction_validates() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(NnError::LengthMismatch {
                declared: 6,
                got: 5
            })
        );
        assert_eq!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(NnError::NotFinite(1))
        );
        assert_eq!(
            Tensor::new(vec![1], vec![f64::INFINITY]),
            Err(NnError::NotFinite(0))
        );
    }

    #[test]
    fn forward_output_shapes() {
        let mnist = ModelParams::he_init(Arch::MnistCnn, 1);
        let logits = forward(&mnist, &mnist_sample(1, 0).features).unwrap();
        assert_eq!(logits.shape(), &[10]);

        let har = ModelParams::he_init(Arch::HarMlp, 1);
        let logits = forward(&har, &har_sample(1, 0).features).unwrap();
        assert_eq!(logits.shape(), &[6]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let mnist = ModelParams::zeros(Arch::MnistCnn);
        let bad = Tensor::zeros(vec![784]);
        assert!(matches!(
            forward(&mnist, &bad),
            Err(NnError::Shape { .. })
        ));
    }

    #[test]
    fn zero_model_produces_zero_logits() {
        for (arch, sample) in [
            (Arch::MnistCnn, mnist_sample(2, 3)),
            (Arch::HarMlp, har_sample(2, 3)),
        ] {
            let params = ModelParams::zeros(arch);
            let logits = forward(&params, &sample.features).unwrap();
            assert!(logits.values().iter().all(|&v| v == 0.0), "{arch:?}");
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let params = ModelParams::he_init(Arch::MnistCnn, 3);
        let sample = mnist_sample(4, 1);
        let a = forward(&params, &sample.features).unwrap();
        let b = forward(&params, &sample.features).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn cross_entropy_uniform_logit_anchors() {
        let ten = Tensor::zeros(vec![10]);
        assert!((cross_entropy(&ten, 0).unwrap() - 10.0f64.ln()).abs() < 1e-12);
        let six = Tensor::zeros(vec![6]);
        assert!((cross_entropy(&six, 5).unwrap() - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let logits = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let loss = cross_entropy(&logits, 0).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(vec![10]);
        assert_eq!(
            cross_entropy(&logits, 10),
            Err(NnError::LabelIndex {
                label: 10,
                classes: 10
            })
        );
    }

    #[test]
    fn softmax_probabilities_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let total: f64 = logits.iter().map(|l| (l - max).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn local_loss_matches_single_sample_cross_entropy() {
        let params = ModelParams::he_init(Arch::HarMlp, 6);
        let sample = har_sample(7, 2);
        let logits = forward(&params, &sample.features).unwrap();
        let expected = cross_entropy(&logits, sample.label).unwrap();
        let got = local_loss(&params, std::slice::from_ref(&sample), 32).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn local_loss_zero_models_hit_log_class_count() {
        let mnist_shard: Vec<Sample> = (0..64).map(|i| mnist_sample(i, (i % 10) as usize)).collect();
        let loss = local_loss(&ModelParams::zeros(Arch::MnistCnn), &mnist_shard, 32).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-9);

        let har_shard: Vec<Sample> = (0..64).map(|i| har_sample(i, (i % 6) as usize)).collect();
        let loss = local_loss(&ModelParams::zeros(Arch::HarMlp), &har_shard, 32).unwrap();
        assert!((loss - 6.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn local_loss_independent_of_batch_size() {
        let params = ModelParams::he_init(Arch::HarMlp, 8);
        let shard: Vec<Sample> = (0..50).map(|i| har_sample(100 + i, (i % 6) as usize)).collect();
        let reference = local_loss(&params, &shard, 32).unwrap();
        for batch_size in [1, 7, 50, 1000] {
            assert_eq!(local_loss(&params, &shard, batch_size).unwrap(), reference);
        }
    }

    #[test]
    fn local_loss_rejects_empty_shard() {
        let params = ModelParams::zeros(Arch::HarMlp);
        assert_eq!(local_loss(&params, &[], 32), Err(NnError::EmptyShard));
    }

    #[test]
    fn canonical_serialize_layout() {
        let zero = ModelParams::zeros(Arch::HarMlp);
        let bytes = canonical_serialize(&zero);
        let value_count = 561 * 128 + 128 + 128 * 64 + 64 + 64 * 6 + 6;
        assert_eq!(bytes.len(), 1 + 8 * value_count);
        assert_eq!(bytes[0], Arch::HarMlp.tag_byte());
        assert!(bytes[1..].iter().all(|&b| b == 0));

        let mnist_zero = ModelParams::zeros(Arch::MnistCnn);
        let mnist_values = 16 * 25 + 16 + 32 * 16 * 25 + 32 + 10 * 1568 + 10;
        assert_eq!(canonical_serialize(&mnist_zero).len(), 1 + 8 * mnist_values);
    }

    #[test]
    fn canonical_serialize_detects_any_change() {
        let a = ModelParams::he_init(Arch::HarMlp, 9);
        let mut b = a.clone();
        // Flip the sign bit of one weight deep in the middle layer.
        let flipped = -b.layers[1].weights.values[17];
        b.layers[1].weights.values[17] = flipped;
        assert_ne!(canonical_serialize(&a), canonical_serialize(&b));
        assert_ne!(model_hash(&a), model_hash(&b));
        assert_eq!(model_hash(&a), model_hash(&a.clone()));
    }

    #[test]
    fn canonical_serialization_round_trips() {
        for arch in [Arch::MnistCnn, Arch::HarMlp] {
            let params = ModelParams::he_init(arch, 40);
            let bytes = canonical_serialize(&params);
            let back = canonical_deserialize(&bytes).unwrap();
            assert_eq!(back, params);
        }
    }

    #[test]
    fn canonical_deserialize_rejects_malformed_bytes() {
        assert_eq!(
            canonical_deserialize(&[]),
            Err(NnError::SerializedLength {
                expected: 1,
                got: 0
            })
        );
        assert_eq!(canonical_deserialize(&[9]), Err(NnError::UnknownArchTag(9)));

        let mut truncated = canonical_serialize(&ModelParams::zeros(Arch::HarMlp));
        truncated.pop();
        assert!(matches!(
            canonical_deserialize(&truncated),
            Err(NnError::SerializedLength { .. })
        ));

        let mut with_nan = canonical_serialize(&ModelParams::zeros(Arch::HarMlp));
        with_nan[1..9].copy_from_slice(&f64::NAN.to_be_bytes());
        assert_eq!(
            canonical_deserialize(&with_nan),
            Err(NnError::NotFinite(0))
        );
    }

    #[test]
    fn sha256_primitive_matches_reference_vector() {
        let empty: [u8; 32] = Sha256::digest([]).into();
        assert_eq!(
            hex::encode(empty),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_limbs_are_big_endian_split() {
        let mut bytes = [0u8; 32];
        bytes[0] = 0x01;
        bytes[15] = 0x02;
        bytes[16] = 0x03;
        bytes[31] = 0x04;
        let digest = ModelDigest::from_bytes(bytes);
        assert_eq!(digest.hi_limb(), (1u128 << 120) | 2);
        assert_eq!(digest.lo_limb(), (3u128 << 120) | 4);
        assert_eq!(digest.to_hex().len(), 64);
    }

    #[test]
    fn he_init_is_seeded_and_bounded() {
        let a = ModelParams::he_init(Arch::HarMlp, 10);
        let b = ModelParams::he_init(Arch::HarMlp, 10);
        let c = ModelParams::he_init(Arch::HarMlp, 11);
        assert_eq!(canonical_serialize(&a), canonical_serialize(&b));
        assert_ne!(canonical_serialize(&a), canonical_serialize(&c));
        let limit = (6.0f64 / 561.0).sqrt();
        assert!(a.layers()[0]
            .weights
            .values()
            .iter()
            .all(|w| w.abs() < limit));
        assert!(a.layers()[0].bias.values().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let params = ModelParams::he_init(Arch::HarMlp, 12);
        let data: Vec<Sample> = (0..40).map(|i| har_sample(i, (i % 6) as usize)).collect();
        let config = SgdConfig {
            learning_rate: 0.0,
            momentum: MOMENTUM,
        };
        let trained = train_one_epoch_with(&params, &data, 32, 99, &config).unwrap();
        assert_eq!(canonical_serialize(&trained), canonical_serialize(&params));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let params = ModelParams::he_init(Arch::HarMlp, 13);
        let data: Vec<Sample> = (0..64).map(|i| har_sample(i, (i % 6) as usize)).collect();
        let a = train_one_epoch(&params, &data, 32, 7).unwrap();
        let b = train_one_epoch(&params, &data, 32, 7).unwrap();
        let c = train_one_epoch(&params, &data, 32, 8).unwrap();
        assert_eq!(canonical_serialize(&a), canonical_serialize(&b));
        assert_ne!(canonical_serialize(&a), canonical_serialize(&c));
    }

    #[test]
    fn training_rejects_empty_or_zero_batch() {
        let params = ModelParams::zeros(Arch::HarMlp);
        assert_eq!(
            train_one_epoch(&params, &[], 32, 0).unwrap_err(),
            NnError::EmptyShard
        );
        let data = vec![har_sample(0, 0)];
        assert_eq!(
            train_one_epoch(&params, &data, 0, 0).unwrap_err(),
            NnError::ZeroBatch
        );
    }

    /// Central-difference gradient check harness: perturbs selected inputs
    /// of a scalar-valued function and compares to analytic gradients.
    fn check_gradient(
        analytic: &[f64],
        mut loss_at: impl FnMut(usize, f64) -> f64,
        indices: &[usize],
    ) {
        const STEP: f64 = 1e-5;
        for &i in indices {
            let plus = loss_at(i, STEP);
            let minus = loss_at(i, -STEP);
            let numeric = (plus - minus) / (2.0 * STEP);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel <= 1e-4,
                "index {i}: analytic {} vs numeric {numeric} (rel {rel})",
                analytic[i]
            );
        }
    }

    #[test]
    fn dense_layer_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let (outputs, inputs) = (3usize, 5usize);
        let weights: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label = 1usize;

        let loss_fn = |w: &[f64], b: &[f64], x: &[f64]| {
            let mut out = vec![0.0; outputs];
            dense_forward(w, outputs, inputs, x, b, &mut out);
            softmax_cross_entropy(&out, label).0
        };

        let mut out = vec![0.0; outputs];
        dense_forward(&weights, outputs, inputs, &x, &bias, &mut out);
        let (_, dlogits) = softmax_cross_entropy(&out, label);
        let mut dw = vec![0.0; 15];
        let mut db = vec![0.0; 3];
        let mut dx = vec![0.0; 5];
        dense_backward(
            &weights, outputs, inputs, &x, &dlogits, &mut dw, &mut db,
            Some(&mut dx),
        );

        check_gradient(
            &dw,
            |i, eps| {
                let mut w2 = weights.clone();
                w2[i] += eps;
                loss_fn(&w2, &bias, &x)
            },
            &(0..15).collect::<Vec<_>>(),
        );
        check_gradient(
            &db,
            |i, eps| {
                let mut b2 = bias.clone();
                b2[i] += eps;
                loss_fn(&weights, &b2, &x)
            },
            &[0, 1, 2],
        );
        check_gradient(
            &dx,
            |i, eps| {
                let mut x2 = x.clone();
                x2[i] += eps;
                loss_fn(&weights, &bias, &x2)
            },
            &[0, 1, 2, 3, 4],
        );
    }

    #[test]
    fn conv_layer_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let (in_c, h, w, out_c, k, pad) = (2usize, 6usize, 6usize, 3usize, 3usize, 1usize);
        let weights: Vec<f64> = (0..out_c * in_c * k * k)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let bias: Vec<f64> = (0..out_c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let input: Vec<f64> = (0..in_c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Random linear readout makes the scalar loss sensitive to every
        // output position.
        let readout: Vec<f64> = (0..out_c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_fn = |wv: &[f64], bv: &[f64], xv: &[f64]| {
            let mut out = vec![0.0; out_c * h * w];
            conv2d_forward(xv, in_c, h, w, wv, out_c, k, pad, bv, &mut out);
            out.iter().zip(&readout).map(|(o, r)| o * r).sum::<f64>()
        };

        let mut dw = vec![0.0; weights.len()];
        let mut db = vec![0.0; bias.len()];
        let mut dx = vec![0.0; input.len()];
        conv2d_backward(
            &input, in_c, h, w, &weights, out_c, k, pad, &readout, &mut dw, &mut db,
            Some(&mut dx),
        );

        let weight_indices: Vec<usize> = (0..weights.len()).step_by(5).collect();
        check_gradient(
            &dw,
            |i, eps| {
                let mut w2 = weights.clone();
                w2[i] += eps;
                loss_fn(&w2, &bias, &input)
            },
            &weight_indices,
        );
        check_gradient(
            &db,
            |i, eps| {
                let mut b2 = bias.clone();
                b2[i] += eps;
                loss_fn(&weights, &b2, &input)
            },
            &[0, 1, 2],
        );
        let input_indices: Vec<usize> = (0..input.len()).step_by(7).collect();
        check_gradient(
            &dx,
            |i, eps| {
                let mut x2 = input.clone();
                x2[i] += eps;
                loss_fn(&weights, &bias, &x2)
            },
            &input_indices,
        );
    }

    #[test]
    fn pool_and_relu_gradient_check() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let (c, h, w) = (2usize, 4usize, 4usize);
        let input: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let readout: Vec<f64> = (0..c * h * w / 4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss_fn = |xv: &[f64]| {
            let mut act = xv.to_vec();
            relu_forward(&mut act);
            let mut out = vec![0.0; c * h * w / 4];
            let mut idx = vec![0usize; out.len()];
            maxpool2_forward(&act, c, h, w, &mut out, &mut idx);
            out.iter().zip(&readout).map(|(o, r)| o * r).sum::<f64>()
        };

        let mut act = input.clone();
        relu_forward(&mut act);
        let mut out = vec![0.0; c * h * w / 4];
        let mut idx = vec![0usize; out.len()];
        maxpool2_forward(&act, c, h, w, &mut out, &mut idx);
        let mut dact = vec![0.0; input.len()];
        maxpool2_backward(&idx, &readout, &mut dact);
        relu_backward(&input, &mut dact);

        // Skip inputs within the finite-difference step of a ReLU kink or a
        // pooling tie, where the function is legitimately non-differentiable.
        let indices: Vec<usize> = (0..input.len())
            .filter(|&i| input[i].abs() > 1e-3)
            .collect();
        check_gradient(&dact, |i, eps| {
            let mut x2 = input.clone();
            x2[i] += eps;
            loss_fn(&x2)
        }, &indices);
    }

    #[test]
    fn full_model_gradient_check_har() {
        // End-to-end check through dense/relu/dropout/softmax with a fixed
        // dropout seed (the mask is part of the function being checked).
        let params = ModelParams::he_init(Arch::HarMlp, 23);
        let sample = har_sample(24, 3);
        let dropout_seed = 77u64;

        let (_, grads) = har_sample_grad(&params, &sample, Some(dropout_seed));

        let loss_at = |layer: usize, index: usize, eps: f64| {
            let mut perturbed = params.clone();
            perturbed.layers[layer].weights.values[index] += eps;
            har_sample_grad(&perturbed, &sample, Some(dropout_seed)).0
        };

        for layer in 0..3 {
            let dw = &grads.layers[layer].0;
            let len = dw.len();
            let indices: Vec<usize> = (0..len).step_by((len / 20).max(1)).collect();
            check_gradient(
                dw,
                |i, eps| loss_at(layer, i, eps),
                &indices,
            );
        }
    }

    #[test]
    fn full_model_gradient_check_mnist() {
        let params = ModelParams::he_init(Arch::MnistCnn, 25);
        let sample = mnist_sample(26, 4);
        let dropout_seed = 88u64;

        let (_, grads) = mnist_sample_grad(&params, &sample, Some(dropout_seed));

        for layer in 0..3 {
            let dw = &grads.layers[layer].0;
            let len = dw.len();
            let indices: Vec<usize> = (0..len).step_by((len / 12).max(1)).collect();
            check_gradient(
                dw,
                |i, eps| {
                    let mut perturbed = params.clone();
                    perturbed.layers[layer].weights.values[i] += eps;
                    mnist_sample_grad(&perturbed, &sample, Some(dropout_seed)).0
                },
                &indices,
            );
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        // Six well-separated Gaussian clusters: one epoch should cut the
        // loss well below the ln 6 starting point.
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let centers: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..561).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let data: Vec<Sample> = (0..240)
            .map(|i| {
                let label = i % 6;
                let values: Vec<f64> = centers[label]
                    .iter()
                    .map(|c| c + rng.gen_range(-0.05..0.05))
                    .collect();
                Sample {
                    features: Tensor::new(vec![561], values).unwrap(),
                    label,
                }
            })
            .collect();
        let initial = ModelParams::he_init(Arch::HarMlp, 31);
        let before = local_loss(&initial, &data, 32).unwrap();
        let trained = train_one_epoch(&initial, &data, 32, 32).unwrap();
        let after = local_loss(&trained, &data, 32).unwrap();
        assert!(
            after < before * 0.8,
            "training did not reduce loss: {before} -> {after}"
        );
    }

    proptest! {
        /// Cross-entropy is nonnegative for any finite logits.
        #[test]
        fn cross_entropy_nonnegative(
            raw in proptest::collection::vec(-50.0f64..50.0, 2..12),
            label_index in 0usize..12,
        ) {
            let label = label_index % raw.len();
            let logits = Tensor::new(vec![raw.len()], raw).unwrap();
            let loss = cross_entropy(&logits, label).unwrap();
            prop_assert!(loss >= 0.0);
        }
    }
}
