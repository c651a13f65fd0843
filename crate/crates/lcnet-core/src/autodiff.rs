//! Reverse-mode gradients for the fixed layer vocabulary.
//!
//! The network is a straight chain, so backward is a hand-written walk over
//! the layers in reverse, consuming the contexts the forward pass saved.
//! There is no general-purpose graph engine on purpose: every backward rule
//! here is small enough to audit against central finite differences, and
//! [`grad_check`] does exactly that, rerunning the whole forward and
//! backward in 64-bit precision (32-bit central differences are too noisy
//! near the 1e-4 tolerance).
//!
//! Piecewise activations define their derivative at kink points by the
//! right-hand piece; the checker re-seeds if any pre-activation lands
//! within 1e-4 of a kink.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{run_forward, ArchError, ForwardOpts, Layer, LcnetConfig, Model, ParamMap, SavedCtx};
use crate::ops::{ConvDesc, Mode};
use crate::tensor::{Element, Tensor, TensorBase};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("invalid label {label}: must be < {classes}")]
    InvalidLabel { label: usize, classes: usize },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("gradient check could not find a kink-free initialization after {0} attempts")]
    KinkAvoidanceFailed(usize),
}

/// Gradients (and forward by-products) of one training step.
pub struct GradTape {
    /// Logits `[N, num_classes]` from the taped forward pass.
    pub logits: Tensor,
    /// One gradient tensor per trainable parameter, aligned by name.
    pub grads: BTreeMap<String, Tensor>,
    /// BN running-statistic updates from the train-mode forward.
    pub running_updates: Vec<(String, Tensor)>,
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy and its gradient w.r.t. the logits:
/// `dlogits = (softmax(logits) - onehot) / N`.
pub(crate) fn softmax_ce<F: Element>(
    logits: &TensorBase<F>,
    labels: &[usize],
) -> Result<(F, TensorBase<F>), AutodiffError> {
    let dims = logits.dims();
    let (n_batch, k) = (dims[0], dims[1]);
    if labels.len() != n_batch {
        return Err(AutodiffError::LabelCount {
            labels: labels.len(),
            batch: n_batch,
        });
    }
    for &label in labels {
        if label >= k {
            return Err(AutodiffError::InvalidLabel { label, classes: k });
        }
    }
    let n_f = F::from_f64(n_batch as f64);
    let mut dlogits = logits.clone();
    let mut loss = F::zero();
    for (n, &label) in labels.iter().enumerate() {
        let row = &mut dlogits.data_mut()[n * k..(n + 1) * k];
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss -= (row[label] / sum).ln();
        for (j, v) in row.iter_mut().enumerate() {
            let p = *v / sum;
            let target = if j == label { F::one() } else { F::zero() };
            *v = (p - target) / n_f;
        }
    }
    Ok((loss / n_f, dlogits))
}

// ---------------------------------------------------------------------------
// Per-layer backward rules
// ---------------------------------------------------------------------------

/// Derivative of H-Swish; kinks at +-3 take the right-hand piece.
#[inline]
pub(crate) fn hswish_derivative<F: Element>(x: F) -> F {
    let three = F::from_f64(3.0);
    if x >= three {
        F::one()
    } else if x >= -three {
        (x + x + three) / F::from_f64(6.0)
    } else {
        F::zero()
    }
}

#[inline]
fn relu_derivative<F: Element>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        F::zero()
    }
}

/// Derivative of H-Sigmoid; kinks at +-3 take the right-hand piece.
#[inline]
fn hsigmoid_derivative<F: Element>(x: F) -> F {
    let three = F::from_f64(3.0);
    if x >= three || x < -three {
        F::zero()
    } else {
        F::from_f64(1.0 / 6.0)
    }
}

pub(crate) fn conv_backward<F: Element>(
    input: &TensorBase<F>,
    weights: &TensorBase<F>,
    desc: &ConvDesc,
    d_out: &TensorBase<F>,
) -> (TensorBase<F>, TensorBase<F>, Option<TensorBase<F>>) {
    let (n_batch, _, h, w) = input.dims4().expect("taped input is 4-D");
    let (_, _, out_h, out_w) = d_out.dims4().expect("conv output is 4-D");
    let k = desc.kernel;
    let stride = desc.stride;
    let pad = desc.padding as isize;
    let cin_per_group = if desc.depthwise { 1 } else { desc.in_channels };

    let x = input.data();
    let wts = weights.data();
    let dy = d_out.data();
    let mut d_input = TensorBase::zeros(input.dims()).unwrap();
    let mut d_weights = TensorBase::zeros(weights.dims()).unwrap();
    let mut d_bias = desc
        .has_bias
        .then(|| TensorBase::zeros(&[desc.out_channels]).unwrap());

    let in_hw = h * w;
    let out_hw = out_h * out_w;
    for n in 0..n_batch {
        for co in 0..desc.out_channels {
            let w_base = co * cin_per_group * k * k;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let g = dy[(n * desc.out_channels + co) * out_hw + oh * out_w + ow];
                    if let Some(db) = d_bias.as_mut() {
                        db.data_mut()[co] += g;
                    }
                    for ci_local in 0..cin_per_group {
                        let ci = if desc.depthwise { co } else { ci_local };
                        let x_base = (n * desc.in_channels + ci) * in_hw;
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - pad;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - pad;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let x_idx = x_base + ih as usize * w + iw as usize;
                                let w_idx = w_base + (ci_local * k + kh) * k + kw;
                                d_weights.data_mut()[w_idx] += g * x[x_idx];
                                d_input.data_mut()[x_idx] += g * wts[w_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_weights, d_bias)
}

/// Backward through batch normalization. With train statistics the mean and
/// variance depend on the input, so the full three-term rule applies; with
/// running statistics the transform is a fixed affine map.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<F: Element>(
    input: &TensorBase<F>,
    gamma: &TensorBase<F>,
    mean: &TensorBase<F>,
    var: &TensorBase<F>,
    eps: F,
    train_stats: bool,
    d_out: &TensorBase<F>,
) -> (TensorBase<F>, TensorBase<F>, TensorBase<F>) {
    let (n_batch, c, h, w) = input.dims4().expect("taped input is 4-D");
    let hw = h * w;
    let m = F::from_f64((n_batch * hw) as f64);
    let x = input.data();
    let dy = d_out.data();

    let mut d_input = TensorBase::zeros(input.dims()).unwrap();
    let mut d_gamma = TensorBase::zeros(&[c]).unwrap();
    let mut d_beta = TensorBase::zeros(&[c]).unwrap();

    for ci in 0..c {
        let inv = F::one() / (var.data()[ci] + eps).sqrt();
        let mu = mean.data()[ci];
        let g = gamma.data()[ci];

        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for n in 0..n_batch {
            let base = (n * c + ci) * hw;
            for i in 0..hw {
                let d = dy[base + i];
                sum_dy += d;
                sum_dy_xhat += d * (x[base + i] - mu) * inv;
            }
        }
        d_gamma.data_mut()[ci] = sum_dy_xhat;
        d_beta.data_mut()[ci] = sum_dy;

        if train_stats {
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for n in 0..n_batch {
                let base = (n * c + ci) * hw;
                for i in 0..hw {
                    let xhat = (x[base + i] - mu) * inv;
                    d_input.data_mut()[base + i] =
                        g * inv * (dy[base + i] - mean_dy - xhat * mean_dy_xhat);
                }
            }
        } else {
            for n in 0..n_batch {
                let base = (n * c + ci) * hw;
                for i in 0..hw {
                    d_input.data_mut()[base + i] = dy[base + i] * g * inv;
                }
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

/// Gradient bundle of one SE module: `(d_input, d_w1, d_b1, d_w2, d_b2)`.
pub(crate) type SeGrads<F> = (
    TensorBase<F>,
    TensorBase<F>,
    TensorBase<F>,
    TensorBase<F>,
    TensorBase<F>,
);

/// Backward through SE gating.
pub(crate) fn se_backward<F: Element>(
    input: &TensorBase<F>,
    parts: &crate::ops::SeParts<F>,
    w1: &TensorBase<F>,
    w2: &TensorBase<F>,
    channels: usize,
    reduction: usize,
    d_out: &TensorBase<F>,
) -> SeGrads<F> {
    let (n_batch, c, h, w) = input.dims4().expect("taped input is 4-D");
    debug_assert_eq!(c, channels);
    let mid = channels / reduction;
    let hw = h * w;
    let hw_f = F::from_f64(hw as f64);
    let x = input.data();
    let dy = d_out.data();

    let mut d_input = TensorBase::zeros(input.dims()).unwrap();
    let mut d_w1 = TensorBase::zeros(&[mid, c]).unwrap();
    let mut d_b1 = TensorBase::zeros(&[mid]).unwrap();
    let mut d_w2 = TensorBase::zeros(&[c, mid]).unwrap();
    let mut d_b2 = TensorBase::zeros(&[c]).unwrap();

    for n in 0..n_batch {
        // direct path: out = x * gate, and gate sensitivity
        let mut d_gate = vec![F::zero(); c];
        for ci in 0..c {
            let gte = parts.gate[n * c + ci];
            let base = (n * c + ci) * hw;
            let mut acc = F::zero();
            for i in 0..hw {
                acc += dy[base + i] * x[base + i];
                d_input.data_mut()[base + i] = dy[base + i] * gte;
            }
            d_gate[ci] = acc;
        }
        // gate = hsigmoid(z2), z2 = w2 * hidden + b2
        let mut d_hidden = vec![F::zero(); mid];
        for ci in 0..c {
            let dz2 = d_gate[ci] * hsigmoid_derivative(parts.z2[n * c + ci]);
            d_b2.data_mut()[ci] += dz2;
            let w_row = &w2.data()[ci * mid..(ci + 1) * mid];
            for mi in 0..mid {
                d_w2.data_mut()[ci * mid + mi] += dz2 * parts.hidden[n * mid + mi];
                d_hidden[mi] += dz2 * w_row[mi];
            }
        }
        // hidden = relu(z1), z1 = w1 * pooled + b1
        let mut d_pooled = vec![F::zero(); c];
        for mi in 0..mid {
            let dz1 = d_hidden[mi] * relu_derivative(parts.z1[n * mid + mi]);
            d_b1.data_mut()[mi] += dz1;
            let w_row = &w1.data()[mi * c..(mi + 1) * c];
            for ci in 0..c {
                d_w1.data_mut()[mi * c + ci] += dz1 * parts.pooled[n * c + ci];
                d_pooled[ci] += dz1 * w_row[ci];
            }
        }
        // pooled = spatial mean of x
        for ci in 0..c {
            let spread = d_pooled[ci] / hw_f;
            let base = (n * c + ci) * hw;
            for i in 0..hw {
                d_input.data_mut()[base + i] += spread;
            }
        }
    }
    (d_input, d_w1, d_b1, d_w2, d_b2)
}

fn fc_backward<F: Element>(
    input: &TensorBase<F>,
    weights: &TensorBase<F>,
    d_out: &TensorBase<F>,
) -> (TensorBase<F>, TensorBase<F>, TensorBase<F>) {
    let (n_batch, d) = (input.dims()[0], input.dims()[1]);
    let k = weights.dims()[0];
    let x = input.data();
    let wt = weights.data();
    let dy = d_out.data();

    let mut d_input = TensorBase::zeros(input.dims()).unwrap();
    let mut d_weights = TensorBase::zeros(weights.dims()).unwrap();
    let mut d_bias = TensorBase::zeros(&[k]).unwrap();
    for n in 0..n_batch {
        for ki in 0..k {
            let g = dy[n * k + ki];
            d_bias.data_mut()[ki] += g;
            for di in 0..d {
                d_weights.data_mut()[ki * d + di] += g * x[n * d + di];
                d_input.data_mut()[n * d + di] += g * wt[ki * d + di];
            }
        }
    }
    (d_input, d_weights, d_bias)
}

/// Walks the chain in reverse, filling parameter gradients and returning
/// the gradient w.r.t. the network input.
pub(crate) fn backward_graph<F: Element>(
    layers: &[Layer],
    params: &ParamMap<F>,
    saved: &[SavedCtx<F>],
    d_output: TensorBase<F>,
) -> Result<(ParamMap<F>, TensorBase<F>), AutodiffError> {
    assert_eq!(layers.len(), saved.len(), "tape must cover every layer");
    let mut grads: ParamMap<F> = BTreeMap::new();
    let mut d = d_output;

    for (layer, ctx) in layers.iter().zip(saved.iter()).rev() {
        d = match (layer, ctx) {
            (Layer::Conv { weight, bias, desc }, SavedCtx::Conv { input }) => {
                let w_t = params
                    .get(weight)
                    .ok_or_else(|| ArchError::MissingParam(weight.clone()))?;
                let (dx, dw, db) = conv_backward(input, w_t, desc, &d);
                grads.insert(weight.clone(), dw);
                if let (Some(bias_key), Some(db)) = (bias.as_ref(), db) {
                    grads.insert(bias_key.clone(), db);
                }
                dx
            }
            (
                Layer::BatchNorm {
                    gamma: gamma_key,
                    beta: beta_key,
                    ..
                },
                SavedCtx::BatchNorm {
                    input,
                    mean,
                    var,
                    train_stats,
                },
            ) => {
                let gamma = params
                    .get(gamma_key)
                    .ok_or_else(|| ArchError::MissingParam(gamma_key.clone()))?;
                let (dx, dg, db) = bn_backward(
                    input,
                    gamma,
                    mean,
                    var,
                    F::from_f32(crate::arch::BN_EPS),
                    *train_stats,
                    &d,
                );
                grads.insert(gamma_key.clone(), dg);
                grads.insert(beta_key.clone(), db);
                dx
            }
            (Layer::Activation(kind), SavedCtx::Activation { input }) => {
                let mut dx = d;
                for (g, &xv) in dx.data_mut().iter_mut().zip(input.data()) {
                    let deriv = match kind {
                        crate::arch::ActKind::HSwish => hswish_derivative(xv),
                        crate::arch::ActKind::Relu => relu_derivative(xv),
                    };
                    *g *= deriv;
                }
                dx
            }
            (
                Layer::Se {
                    w1: w1_key,
                    b1: b1_key,
                    w2: w2_key,
                    b2: b2_key,
                    channels,
                    reduction,
                },
                SavedCtx::Se { input, parts },
            ) => {
                let w1 = params
                    .get(w1_key)
                    .ok_or_else(|| ArchError::MissingParam(w1_key.clone()))?;
                let w2 = params
                    .get(w2_key)
                    .ok_or_else(|| ArchError::MissingParam(w2_key.clone()))?;
                let (dx, dw1, db1, dw2, db2) =
                    se_backward(input, parts, w1, w2, *channels, *reduction, &d);
                grads.insert(w1_key.clone(), dw1);
                grads.insert(b1_key.clone(), db1);
                grads.insert(w2_key.clone(), dw2);
                grads.insert(b2_key.clone(), db2);
                dx
            }
            (Layer::GlobalAvgPool, SavedCtx::GlobalAvgPool { in_dims }) => {
                let (n_batch, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
                let hw = h * w;
                let hw_f = F::from_f64(hw as f64);
                let mut dx = TensorBase::zeros(in_dims).unwrap();
                for i in 0..n_batch * c {
                    let spread = d.data()[i] / hw_f;
                    for v in &mut dx.data_mut()[i * hw..(i + 1) * hw] {
                        *v = spread;
                    }
                }
                dx
            }
            (Layer::Flatten, SavedCtx::Flatten { in_dims }) => {
                d.reshaped(in_dims).expect("flatten preserves length")
            }
            (Layer::Dropout { .. }, SavedCtx::Dropout { mask, scale }) => match mask {
                None => d,
                Some(mask) => {
                    let scale_f = F::from_f64(*scale);
                    let mut dx = d;
                    for (g, keep) in dx.data_mut().iter_mut().zip(mask.iter()) {
                        *g = if *keep { *g * scale_f } else { F::zero() };
                    }
                    dx
                }
            },
            (Layer::FullyConnected { weight, bias, .. }, SavedCtx::FullyConnected { input }) => {
                let w_t = params
                    .get(weight)
                    .ok_or_else(|| ArchError::MissingParam(weight.clone()))?;
                let (dx, dw, db) = fc_backward(input, w_t, &d);
                grads.insert(weight.clone(), dw);
                grads.insert(bias.clone(), db);
                dx
            }
            _ => unreachable!("tape context does not match layer"),
        };
    }
    Ok((grads, d))
}

// ---------------------------------------------------------------------------
// Model-level entry points
// ---------------------------------------------------------------------------

/// Train-mode forward + backward: returns the mean softmax cross-entropy
/// loss and a [`GradTape`] with one gradient per trainable parameter. BN
/// uses batch statistics in both directions.
pub fn model_backward(
    model: &Model,
    input: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
) -> Result<(f32, GradTape), AutodiffError> {
    let opts = ForwardOpts {
        workers: 1,
        dropout_seed,
    };
    let run = run_forward(
        model.layers(),
        model.segments(),
        model.params(),
        input,
        Mode::Train,
        &opts,
        true,
    )?;
    let (loss, dlogits) = softmax_ce(&run.output, labels)?;
    let saved = run.saved.expect("tape was requested");
    let (grads, _) = backward_graph(model.layers(), model.params(), &saved, dlogits)?;
    Ok((
        loss,
        GradTape {
            logits: run.output,
            grads,
            running_updates: run.running_updates,
        },
    ))
}

fn widen_params(params: &ParamMap<f32>) -> ParamMap<f64> {
    params.iter().map(|(k, v)| (k.clone(), v.widen())).collect()
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of (parameter, index) pairs compared.
    pub checked: usize,
    /// Parameter tensor holding the worst error.
    pub worst_param: String,
}

/// Canonical tiny configuration for gradient checking: every layer type
/// present, small enough to finite-difference in seconds.
pub fn grad_check_config() -> LcnetConfig {
    LcnetConfig {
        scale: 0.25,
        num_classes: 3,
        ..Default::default()
    }
}

/// Runs [`grad_check`] on the canonical tiny config at 32x32. The batch of
/// 8 keeps the train-mode BN statistics well conditioned at the 1x1-spatial
/// tail blocks. The 1e-5 base step sits below the kink-crossing scale of
/// this landscape: BN-train renormalization keeps parameter perturbations
/// from attenuating downstream, so larger steps push pre-activations across
/// the piecewise boundaries and central differences stop converging.
pub fn grad_check_default(seed: u64) -> Result<GradCheckReport, AutodiffError> {
    grad_check(&grad_check_config(), (32, 32), 8, seed, 1e-5)
}

/// Sampled parameters whose own pre-activations sit within this distance
/// of a piecewise kink are resampled.
const KINK_TOLERANCE: f64 = 1e-4;
/// Train-mode BN channels with batch variance below this force a re-seed:
/// near `var ~ eps` the loss curvature blows up and central differences
/// stop resolving the gradient.
const BN_VARIANCE_FLOOR: f64 = 1e-6;

/// Degenerate batch statistics anywhere invalidate finite differences for
/// every upstream parameter, so this is checked globally per seed.
fn has_degenerate_bn(saved: &[SavedCtx<f64>]) -> bool {
    saved.iter().any(|ctx| {
        matches!(ctx,
            SavedCtx::BatchNorm { var, train_stats: true, .. }
                if var.data().iter().any(|&v| v < BN_VARIANCE_FLOOR))
    })
}

#[inline]
fn near_hswish_kink(v: f64) -> bool {
    (v - 3.0).abs() < KINK_TOLERANCE || (v + 3.0).abs() < KINK_TOLERANCE
}

/// Finds the first activation layer after `li` (the tape index equals the
/// layer index) and returns its kind and saved input. Stops at the fully
/// connected head, which no activation follows.
fn next_activation<'a>(
    layers: &[Layer],
    saved: &'a [SavedCtx<f64>],
    li: usize,
) -> Option<(crate::arch::ActKind, &'a TensorBase<f64>)> {
    for (layer, ctx) in layers.iter().zip(saved.iter()).skip(li + 1) {
        match (layer, ctx) {
            (Layer::Activation(kind), SavedCtx::Activation { input }) => {
                return Some((*kind, input))
            }
            (Layer::FullyConnected { .. }, _) => return None,
            _ => {}
        }
    }
    None
}

/// True if the pre-activation values parameter `key[idx]` immediately
/// feeds lie within [`KINK_TOLERANCE`] of a piecewise kink, in which case
/// the central difference for that parameter is unreliable and it gets
/// resampled.
fn theta_near_kink(
    layers: &[Layer],
    saved: &[SavedCtx<f64>],
    key_layer: &BTreeMap<String, usize>,
    key: &str,
    idx: usize,
) -> bool {
    let li = match key_layer.get(key) {
        Some(&li) => li,
        None => return false,
    };
    let channel_values_risky = |channel: usize| -> bool {
        match next_activation(layers, saved, li) {
            None => false,
            Some((kind, input)) => {
                let (n_batch, c, h, w) = input.dims4().expect("activations are 4-D");
                let hw = h * w;
                (0..n_batch).any(|n| {
                    let base = (n * c + channel) * hw;
                    input.data()[base..base + hw].iter().any(|&v| match kind {
                        crate::arch::ActKind::HSwish => near_hswish_kink(v),
                        crate::arch::ActKind::Relu => v.abs() < KINK_TOLERANCE,
                    })
                })
            }
        }
    };
    match &layers[li] {
        Layer::Conv { weight, desc, .. } => {
            let channel = if key == weight {
                let per_out = weight_elems_per_output(desc);
                idx / per_out
            } else {
                idx // bias: one entry per output channel
            };
            channel_values_risky(channel)
        }
        Layer::BatchNorm { .. } => channel_values_risky(idx),
        Layer::Se {
            w1,
            b1,
            w2,
            channels,
            reduction,
            ..
        } => {
            let SavedCtx::Se { parts, .. } = &saved[li] else {
                return false;
            };
            let c = *channels;
            let mid = c / reduction;
            if key == w1 || key == b1 {
                // feeds the internal ReLU row z1[.., mi]
                let mi = if key == w1 { idx / c } else { idx };
                parts
                    .z1
                    .iter()
                    .skip(mi)
                    .step_by(mid)
                    .any(|&v| v.abs() < KINK_TOLERANCE)
            } else {
                // feeds the H-Sigmoid row z2[.., ci]
                let ci = if key == w2 { idx / mid } else { idx };
                parts
                    .z2
                    .iter()
                    .skip(ci)
                    .step_by(c)
                    .any(near_hswish_kink_ref)
            }
        }
        _ => false,
    }
}

fn near_hswish_kink_ref(v: &f64) -> bool {
    near_hswish_kink(*v)
}

fn weight_elems_per_output(desc: &ConvDesc) -> usize {
    let cin_per_group = if desc.depthwise { 1 } else { desc.in_channels };
    cin_per_group * desc.kernel * desc.kernel
}

/// Maps every parameter key to the layer that consumes it.
fn param_layer_index(layers: &[Layer]) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for (li, layer) in layers.iter().enumerate() {
        match layer {
            Layer::Conv { weight, bias, .. } => {
                map.insert(weight.clone(), li);
                if let Some(b) = bias {
                    map.insert(b.clone(), li);
                }
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                for k in [gamma, beta, running_mean, running_var] {
                    map.insert(k.clone(), li);
                }
            }
            Layer::Se { w1, b1, w2, b2, .. } => {
                for k in [w1, b1, w2, b2] {
                    map.insert(k.clone(), li);
                }
            }
            Layer::FullyConnected { weight, bias, .. } => {
                map.insert(weight.clone(), li);
                map.insert(bias.clone(), li);
            }
            _ => {}
        }
    }
    map
}

/// Central-difference validation of every backward rule, in 64-bit
/// precision. Samples at least 200 parameters spread over every parameter
/// tensor; per parameter the step is `h_base * max(1, |theta|)` and the
/// relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    config: &LcnetConfig,
    input_hw: (usize, usize),
    batch: usize,
    seed: u64,
    h_base: f64,
) -> Result<GradCheckReport, AutodiffError> {
    grad_check_impl(config, input_hw, batch, seed, h_base, false)
}

/// Negative control: reruns the default check with one analytic gradient
/// tensor deliberately corrupted. A healthy checker must report a large
/// error; callers treat a pass here as a harness fault.
pub fn grad_check_negative_control(seed: u64) -> Result<GradCheckReport, AutodiffError> {
    grad_check_impl(&grad_check_config(), (32, 32), 8, seed, 1e-5, true)
}

fn grad_check_impl(
    config: &LcnetConfig,
    input_hw: (usize, usize),
    batch: usize,
    seed: u64,
    h_base: f64,
    corrupt_one_gradient: bool,
) -> Result<GradCheckReport, AutodiffError> {
    const MAX_ATTEMPTS: usize = 16;
    const TARGET_SAMPLES: usize = 200;

    let opts = ForwardOpts {
        workers: 1,
        dropout_seed: seed,
    };

    for attempt in 0..MAX_ATTEMPTS {
        let build_seed = seed.wrapping_add(attempt as u64);
        let model = crate::arch::build_model(config, build_seed)?;
        let mut params = widen_params(model.params());

        let mut rng = ChaCha8Rng::seed_from_u64(build_seed ^ 0x9e3779b97f4a7c15);
        let (h, w) = input_hw;
        let input = TensorBase::<f64>::from_vec(
            &[batch, 3, h, w],
            (0..batch * 3 * h * w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();

        let run = run_forward(
            model.layers(),
            model.segments(),
            &params,
            &input,
            Mode::Train,
            &opts,
            true,
        )?;
        let saved = run.saved.expect("tape was requested");
        if has_degenerate_bn(&saved) {
            continue; // re-seed: batch statistics too degenerate for FD
        }

        let (_, dlogits) = softmax_ce(&run.output, &labels)?;
        let (mut analytic, _) = backward_graph(model.layers(), &params, &saved, dlogits)?;
        if corrupt_one_gradient {
            let first = analytic.values_mut().next().expect("model has parameters");
            for v in first.data_mut() {
                *v = *v * 2.0 + 1.0;
            }
        }

        // Sample indices: every trainable tensor contributes, topped up to
        // the target count. A draw whose pre-activation sits on a kink is
        // resampled.
        let key_layer = param_layer_index(model.layers());
        let keys: Vec<String> = analytic.keys().cloned().collect();
        let per_tensor = TARGET_SAMPLES.div_ceil(keys.len()).max(1);
        let mut samples: Vec<(String, usize)> = Vec::new();
        for key in &keys {
            let len = analytic[key].len();
            for _ in 0..per_tensor.min(len) {
                let mut idx = rng.gen_range(0..len);
                for _ in 0..32 {
                    if !theta_near_kink(model.layers(), &saved, &key_layer, key, idx) {
                        break;
                    }
                    idx = rng.gen_range(0..len);
                }
                samples.push((key.clone(), idx));
            }
        }

        let loss_at = |params: &ParamMap<f64>| -> Result<f64, AutodiffError> {
            let run = run_forward(
                model.layers(),
                model.segments(),
                params,
                &input,
                Mode::Train,
                &opts,
                false,
            )?;
            Ok(softmax_ce(&run.output, &labels)?.0)
        };

        let mut max_rel_error = 0.0f64;
        let mut worst_param = String::new();
        let checked = samples.len();
        for (key, idx) in samples {
            let theta = params[&key].data()[idx];
            let step = h_base * theta.abs().max(1.0);
            params.get_mut(&key).unwrap().data_mut()[idx] = theta + step;
            let loss_plus = loss_at(&params)?;
            params.get_mut(&key).unwrap().data_mut()[idx] = theta - step;
            let loss_minus = loss_at(&params)?;
            params.get_mut(&key).unwrap().data_mut()[idx] = theta;

            let numeric = (loss_plus - loss_minus) / (2.0 * step);
            let ana = analytic[&key].data()[idx];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst_param = key.clone();
            }
        }

        return Ok(GradCheckReport {
            max_rel_error,
            checked,
            worst_param,
        });
    }
    Err(AutodiffError::KinkAvoidanceFailed(MAX_ATTEMPTS))
}
