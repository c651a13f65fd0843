//! Forward numerical kernels for every layer type in the network: standard
//! and depthwise convolution, batch normalization (inference and training
//! semantics), BN folding, the hard activations, squeeze-and-excitation,
//! global average pooling, the fully connected head, softmax and inverted
//! dropout.
//!
//! All ops are pure functions over immutable inputs and are deterministic:
//! the same inputs (and seed, where one applies) produce bit-identical
//! outputs for any worker count.

mod conv;

pub use conv::{conv2d_fast, conv2d_naive, ConvDesc};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Element, TensorBase, TensorError};

#[derive(Debug, Error)]
pub enum OpsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid convolution descriptor: {0}")]
    InvalidDesc(String),
    #[error("invalid batch norm parameters: {0}")]
    InvalidBatchNorm(String),
    #[error("degenerate batch: batch statistics need N*H*W >= 2 per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid dropout rate {0}: must satisfy 0 <= rate < 1")]
    InvalidRate(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Execution mode. Training uses batch statistics and live dropout;
/// inference uses running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization parameters.
#[derive(Debug, Clone)]
pub struct BatchNormParams<F = f32> {
    pub gamma: TensorBase<F>,
    pub beta: TensorBase<F>,
    pub running_mean: TensorBase<F>,
    pub running_var: TensorBase<F>,
    pub eps: F,
}

impl<F: Element> BatchNormParams<F> {
    pub fn new(
        gamma: TensorBase<F>,
        beta: TensorBase<F>,
        running_mean: TensorBase<F>,
        running_var: TensorBase<F>,
        eps: F,
    ) -> Result<Self, OpsError> {
        let c = gamma.len();
        for (name, t) in [
            ("beta", &beta),
            ("running_mean", &running_mean),
            ("running_var", &running_var),
        ] {
            if t.len() != c || t.rank() != 1 {
                return Err(OpsError::InvalidBatchNorm(format!(
                    "{name} must be a vector of length {c}, got shape {:?}",
                    t.dims()
                )));
            }
        }
        if running_var.data().iter().any(|&v| v < F::zero()) {
            return Err(OpsError::InvalidBatchNorm(
                "running_var must be non-negative".into(),
            ));
        }
        if eps <= F::zero() {
            return Err(OpsError::InvalidBatchNorm("eps must be positive".into()));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Identity parameters: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize, eps: F) -> Self {
        Self {
            gamma: TensorBase::filled(&[channels], F::one()).unwrap(),
            beta: TensorBase::zeros(&[channels]).unwrap(),
            running_mean: TensorBase::zeros(&[channels]).unwrap(),
            running_var: TensorBase::filled(&[channels], F::one()).unwrap(),
            eps,
        }
    }
}

/// Inference-mode BN: `gamma * (x - running_mean) / sqrt(running_var + eps) + beta`
/// per channel.
pub fn batchnorm_infer<F: Element>(
    input: &TensorBase<F>,
    bn: &BatchNormParams<F>,
) -> Result<TensorBase<F>, OpsError> {
    let (n_batch, c, h, w) = input.dims4().map_err(OpsError::from)?;
    if c != bn.channels() {
        return Err(OpsError::ShapeMismatch(format!(
            "input has {c} channels, batch norm has {}",
            bn.channels()
        )));
    }
    let mut out = input.clone();
    let hw = h * w;
    for ci in 0..c {
        let scale = bn.gamma.data()[ci] / (bn.running_var.data()[ci] + bn.eps).sqrt();
        let shift = bn.beta.data()[ci] - bn.running_mean.data()[ci] * scale;
        for n in 0..n_batch {
            let base = (n * c + ci) * hw;
            for v in &mut out.data_mut()[base..base + hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Output bundle of [`batchnorm_train`].
pub struct BnTrainOutput<F> {
    pub output: TensorBase<F>,
    pub batch_mean: TensorBase<F>,
    /// Biased variance (divided by N*H*W).
    pub batch_var: TensorBase<F>,
    pub new_running_mean: TensorBase<F>,
    pub new_running_var: TensorBase<F>,
}

/// Training-mode BN: normalizes with per-channel batch statistics (biased
/// variance) and reports updated running statistics:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn batchnorm_train<F: Element>(
    input: &TensorBase<F>,
    bn: &BatchNormParams<F>,
    momentum: F,
) -> Result<BnTrainOutput<F>, OpsError> {
    let (n_batch, c, h, w) = input.dims4().map_err(OpsError::from)?;
    if c != bn.channels() {
        return Err(OpsError::ShapeMismatch(format!(
            "input has {c} channels, batch norm has {}",
            bn.channels()
        )));
    }
    let hw = h * w;
    let m = n_batch * hw;
    if m < 2 {
        return Err(OpsError::DegenerateBatch(m));
    }
    let m_f = F::from_f64(m as f64);

    let mut mean = TensorBase::zeros(&[c]).unwrap();
    let mut var = TensorBase::zeros(&[c]).unwrap();
    let x = input.data();
    for ci in 0..c {
        let mut acc = F::zero();
        for n in 0..n_batch {
            let base = (n * c + ci) * hw;
            for &v in &x[base..base + hw] {
                acc += v;
            }
        }
        let mu = acc / m_f;
        let mut acc2 = F::zero();
        for n in 0..n_batch {
            let base = (n * c + ci) * hw;
            for &v in &x[base..base + hw] {
                let d = v - mu;
                acc2 += d * d;
            }
        }
        mean.data_mut()[ci] = mu;
        var.data_mut()[ci] = acc2 / m_f;
    }

    let mut out = input.clone();
    for ci in 0..c {
        let inv = F::one() / (var.data()[ci] + bn.eps).sqrt();
        let g = bn.gamma.data()[ci];
        let b = bn.beta.data()[ci];
        let mu = mean.data()[ci];
        for n in 0..n_batch {
            let base = (n * c + ci) * hw;
            for v in &mut out.data_mut()[base..base + hw] {
                *v = g * (*v - mu) * inv + b;
            }
        }
    }

    let keep = F::one() - momentum;
    let mut new_mean = bn.running_mean.clone();
    let mut new_var = bn.running_var.clone();
    for ci in 0..c {
        new_mean.data_mut()[ci] = keep * bn.running_mean.data()[ci] + momentum * mean.data()[ci];
        new_var.data_mut()[ci] = keep * bn.running_var.data()[ci] + momentum * var.data()[ci];
    }

    Ok(BnTrainOutput {
        output: out,
        batch_mean: mean,
        batch_var: var,
        new_running_mean: new_mean,
        new_running_var: new_var,
    })
}

/// Folds inference-mode BN into the preceding convolution:
/// `w' = w * gamma / sqrt(var + eps)`, `b' = (b - mean) * gamma / sqrt(var + eps) + beta`.
pub fn bn_fold<F: Element>(
    conv_weights: &TensorBase<F>,
    conv_bias: Option<&TensorBase<F>>,
    bn: &BatchNormParams<F>,
) -> Result<(TensorBase<F>, TensorBase<F>), OpsError> {
    let out_c = conv_weights.dims()[0];
    if out_c != bn.channels() {
        return Err(OpsError::ShapeMismatch(format!(
            "conv has {out_c} output channels, batch norm has {}",
            bn.channels()
        )));
    }
    if let Some(b) = conv_bias {
        if b.len() != out_c {
            return Err(OpsError::ShapeMismatch(format!(
                "conv bias length {} != out channels {out_c}",
                b.len()
            )));
        }
    }
    let per_out: usize = conv_weights.len() / out_c;
    let mut w = conv_weights.clone();
    let mut b_out = TensorBase::zeros(&[out_c]).unwrap();
    for co in 0..out_c {
        let scale = bn.gamma.data()[co] / (bn.running_var.data()[co] + bn.eps).sqrt();
        for v in &mut w.data_mut()[co * per_out..(co + 1) * per_out] {
            *v *= scale;
        }
        let b0 = conv_bias.map_or(F::zero(), |b| b.data()[co]);
        b_out.data_mut()[co] =
            (b0 - bn.running_mean.data()[co]) * scale + bn.beta.data()[co];
    }
    Ok((w, b_out))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn hsigmoid_scalar<F: Element>(x: F) -> F {
    let six = F::from_f64(6.0);
    (x + F::from_f64(3.0)).max(F::zero()).min(six) / six
}

#[inline]
pub(crate) fn hswish_scalar<F: Element>(x: F) -> F {
    x * hsigmoid_scalar(x)
}

fn map_elementwise<F: Element>(x: &TensorBase<F>, f: impl Fn(F) -> F) -> TensorBase<F> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = f(*v);
    }
    out
}

/// `x * min(max(x + 3, 0), 6) / 6`, elementwise.
pub fn hswish<F: Element>(x: &TensorBase<F>) -> TensorBase<F> {
    map_elementwise(x, hswish_scalar)
}

/// `min(max(x + 3, 0), 6) / 6`, elementwise.
pub fn hsigmoid<F: Element>(x: &TensorBase<F>) -> TensorBase<F> {
    map_elementwise(x, hsigmoid_scalar)
}

/// `max(x, 0)`, elementwise.
pub fn relu<F: Element>(x: &TensorBase<F>) -> TensorBase<F> {
    map_elementwise(x, |v| v.max(F::zero()))
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation
// ---------------------------------------------------------------------------

/// Squeeze-and-excitation parameters: two small transforms with ReLU and
/// H-Sigmoid activations, producing per-channel gates in [0, 1].
#[derive(Debug, Clone)]
pub struct SeParams<F = f32> {
    pub channels: usize,
    pub reduction: usize,
    /// `[channels / reduction, channels]`
    pub w1: TensorBase<F>,
    pub b1: TensorBase<F>,
    /// `[channels, channels / reduction]`
    pub w2: TensorBase<F>,
    pub b2: TensorBase<F>,
}

impl<F: Element> SeParams<F> {
    pub fn new(
        channels: usize,
        reduction: usize,
        w1: TensorBase<F>,
        b1: TensorBase<F>,
        w2: TensorBase<F>,
        b2: TensorBase<F>,
    ) -> Result<Self, OpsError> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(OpsError::ShapeMismatch(format!(
                "channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let mid = channels / reduction;
        if w1.dims() != [mid, channels] {
            return Err(OpsError::ShapeMismatch(format!(
                "w1 shape {:?}, expected [{mid}, {channels}]",
                w1.dims()
            )));
        }
        if b1.dims() != [mid] || b2.dims() != [channels] {
            return Err(OpsError::ShapeMismatch("SE bias shape".into()));
        }
        if w2.dims() != [channels, mid] {
            return Err(OpsError::ShapeMismatch(format!(
                "w2 shape {:?}, expected [{channels}, {mid}]",
                w2.dims()
            )));
        }
        Ok(Self {
            channels,
            reduction,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// Intermediate values of one SE evaluation, kept for the backward pass.
pub(crate) struct SeParts<F> {
    /// `[N, C]` spatial means.
    pub pooled: Vec<F>,
    /// `[N, C/r]` pre-ReLU.
    pub z1: Vec<F>,
    /// `[N, C/r]` post-ReLU.
    pub hidden: Vec<F>,
    /// `[N, C]` pre-H-Sigmoid.
    pub z2: Vec<F>,
    /// `[N, C]` gates in [0, 1].
    pub gate: Vec<F>,
    pub output: TensorBase<F>,
}

pub(crate) fn se_forward_parts<F: Element>(
    input: &TensorBase<F>,
    se: &SeParams<F>,
) -> Result<SeParts<F>, OpsError> {
    let (n_batch, c, h, w) = input.dims4().map_err(OpsError::from)?;
    if c != se.channels {
        return Err(OpsError::ShapeMismatch(format!(
            "input has {c} channels, SE expects {}",
            se.channels
        )));
    }
    let mid = c / se.reduction;
    let hw = h * w;
    let hw_f = F::from_f64(hw as f64);
    let x = input.data();

    let mut pooled = vec![F::zero(); n_batch * c];
    for n in 0..n_batch {
        for ci in 0..c {
            let base = (n * c + ci) * hw;
            let mut acc = F::zero();
            for &v in &x[base..base + hw] {
                acc += v;
            }
            pooled[n * c + ci] = acc / hw_f;
        }
    }

    let mut z1 = vec![F::zero(); n_batch * mid];
    for n in 0..n_batch {
        for mi in 0..mid {
            let mut acc = se.b1.data()[mi];
            let w_row = &se.w1.data()[mi * c..(mi + 1) * c];
            for ci in 0..c {
                acc += w_row[ci] * pooled[n * c + ci];
            }
            z1[n * mid + mi] = acc;
        }
    }
    let hidden: Vec<F> = z1.iter().map(|&v| v.max(F::zero())).collect();

    let mut z2 = vec![F::zero(); n_batch * c];
    for n in 0..n_batch {
        for ci in 0..c {
            let mut acc = se.b2.data()[ci];
            let w_row = &se.w2.data()[ci * mid..(ci + 1) * mid];
            for mi in 0..mid {
                acc += w_row[mi] * hidden[n * mid + mi];
            }
            z2[n * c + ci] = acc;
        }
    }
    let gate: Vec<F> = z2.iter().map(|&v| hsigmoid_scalar(v)).collect();

    let mut output = input.clone();
    for n in 0..n_batch {
        for ci in 0..c {
            let g = gate[n * c + ci];
            let base = (n * c + ci) * hw;
            for v in &mut output.data_mut()[base..base + hw] {
                *v *= g;
            }
        }
    }

    Ok(SeParts {
        pooled,
        z1,
        hidden,
        z2,
        gate,
        output,
    })
}

/// Applies squeeze-and-excitation channel gating:
/// `out = input * hsigmoid(w2 * relu(w1 * mean(input) + b1) + b2)` per channel.
pub fn se_apply<F: Element>(
    input: &TensorBase<F>,
    se: &SeParams<F>,
) -> Result<TensorBase<F>, OpsError> {
    Ok(se_forward_parts(input, se)?.output)
}

// ---------------------------------------------------------------------------
// Pooling, head, softmax, dropout
// ---------------------------------------------------------------------------

/// Spatial arithmetic mean per (n, c): `[N, C, H, W] -> [N, C, 1, 1]`.
pub fn global_avg_pool<F: Element>(input: &TensorBase<F>) -> Result<TensorBase<F>, OpsError> {
    let (n_batch, c, h, w) = input.dims4().map_err(OpsError::from)?;
    let hw = h * w;
    let hw_f = F::from_f64(hw as f64);
    let x = input.data();
    let mut out = TensorBase::zeros(&[n_batch, c, 1, 1]).unwrap();
    for i in 0..n_batch * c {
        let mut acc = F::zero();
        for &v in &x[i * hw..(i + 1) * hw] {
            acc += v;
        }
        out.data_mut()[i] = acc / hw_f;
    }
    Ok(out)
}

/// `out = input * weights^T + bias` with `input [N, D]`, `weights [K, D]`,
/// `bias [K]`.
pub fn fully_connected<F: Element>(
    input: &TensorBase<F>,
    weights: &TensorBase<F>,
    bias: &TensorBase<F>,
) -> Result<TensorBase<F>, OpsError> {
    let dims = input.dims();
    if dims.len() != 2 {
        return Err(OpsError::ShapeMismatch(format!(
            "fully connected input must be [N, D], got {dims:?}"
        )));
    }
    let (n_batch, d) = (dims[0], dims[1]);
    let wd = weights.dims();
    if wd.len() != 2 || wd[1] != d {
        return Err(OpsError::ShapeMismatch(format!(
            "weight shape {wd:?} incompatible with input width {d}"
        )));
    }
    let k = wd[0];
    if bias.dims() != [k] {
        return Err(OpsError::ShapeMismatch(format!(
            "bias shape {:?}, expected [{k}]",
            bias.dims()
        )));
    }
    let mut out = TensorBase::zeros(&[n_batch, k]).unwrap();
    for n in 0..n_batch {
        let x_row = &input.data()[n * d..(n + 1) * d];
        for ki in 0..k {
            let w_row = &weights.data()[ki * d..(ki + 1) * d];
            let mut acc = bias.data()[ki];
            for (xv, wv) in x_row.iter().zip(w_row.iter()) {
                acc += *xv * *wv;
            }
            out.data_mut()[n * k + ki] = acc;
        }
    }
    Ok(out)
}

/// Row-wise exp-normalization with max subtraction; rows sum to 1.
pub fn softmax<F: Element>(logits: &TensorBase<F>) -> Result<TensorBase<F>, OpsError> {
    let dims = logits.dims();
    if dims.len() != 2 {
        return Err(OpsError::ShapeMismatch(format!(
            "softmax input must be [N, K], got {dims:?}"
        )));
    }
    let (n_batch, k) = (dims[0], dims[1]);
    let mut out = logits.clone();
    for n in 0..n_batch {
        let row = &mut out.data_mut()[n * k..(n + 1) * k];
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Deterministic keep/drop decisions for inverted dropout. One boolean per
/// element; `true` means the element survives.
pub(crate) fn dropout_mask(len: usize, rate: f32, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen::<f32>() >= rate).collect()
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Inference mode is
/// the identity. Deterministic per seed.
pub fn dropout<F: Element>(
    x: &TensorBase<F>,
    rate: f32,
    mode: Mode,
    seed: u64,
) -> Result<TensorBase<F>, OpsError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(OpsError::InvalidRate(rate));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, seed);
    let scale = F::from_f64(1.0 / (1.0 - rate as f64));
    let mut out = x.clone();
    for (v, keep) in out.data_mut().iter_mut().zip(mask) {
        *v = if keep { *v * scale } else { F::zero() };
    }
    Ok(out)
}
