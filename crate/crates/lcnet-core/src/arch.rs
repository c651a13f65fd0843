//! Network construction: the 13-block stage table encoded as data, the
//! width-multiplier rounding rule, ablation masks, and an executable
//! [`Model`] with a forward pass.
//!
//! The architecture is a straight chain with no shortcuts, concats or
//! elementwise adds: stem conv, 13 depthwise-separable blocks (depthwise
//! conv + BN + activation, optional SE between the depthwise and pointwise
//! stages, pointwise conv + BN + activation), global average pooling, an
//! optional bias-carrying 1x1 conv without BN, dropout, and the fully
//! connected classifier. Inference mode appends softmax.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ops::{
    self, batchnorm_infer, batchnorm_train, conv2d_fast, dropout_mask, fully_connected,
    global_avg_pool, hswish, relu, softmax, BatchNormParams, ConvDesc, Mode, OpsError, SeParams,
};
use crate::tensor::{Element, Tensor, TensorBase};
use crate::weights;

/// Number of depthwise-separable blocks; also the mask string length.
pub const NUM_BLOCKS: usize = 13;
/// SE bottleneck reduction ratio.
pub const SE_REDUCTION: usize = 4;
/// Batch norm epsilon used throughout the network.
pub const BN_EPS: f32 = 1e-5;
/// Batch norm running-statistics momentum:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing parameter tensor '{0}'")]
    MissingParam(String),
    #[error(transparent)]
    Ops(#[from] OpsError),
}

/// One row of the base stage table, at multiplier 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub kernel: usize,
    pub stride: usize,
    pub in_c_base: usize,
    pub out_c_base: usize,
    pub use_se: bool,
}

/// The 13 depthwise-separable block rows at base width. The stem
/// (3x3 stride-2 conv, 3 -> 16) sits outside this list.
pub fn base_block_table() -> [BlockSpec; NUM_BLOCKS] {
    const fn row(
        kernel: usize,
        stride: usize,
        in_c_base: usize,
        out_c_base: usize,
        use_se: bool,
    ) -> BlockSpec {
        BlockSpec {
            kernel,
            stride,
            in_c_base,
            out_c_base,
            use_se,
        }
    }
    [
        row(3, 1, 16, 32, false),
        row(3, 2, 32, 64, false),
        row(3, 1, 64, 64, false),
        row(3, 2, 64, 128, false),
        row(3, 1, 128, 128, false),
        row(3, 2, 128, 256, false),
        row(5, 1, 256, 256, false),
        row(5, 1, 256, 256, false),
        row(5, 1, 256, 256, false),
        row(5, 1, 256, 256, false),
        row(5, 1, 256, 256, false),
        row(5, 2, 256, 512, true),
        row(5, 1, 512, 512, true),
    ]
}

/// Rounds a scaled channel count to a multiple of `divisor`, never dropping
/// below `divisor`, with a 10% anti-shrink guard:
/// `new_v = max(divisor, floor(v + divisor/2) div divisor * divisor)`,
/// then `new_v += divisor` if `new_v < 0.9 * v`.
pub fn make_divisible(v: f64, divisor: usize) -> Result<usize, ArchError> {
    if v.is_nan() || v <= 0.0 || divisor == 0 {
        return Err(ArchError::InvalidArgument(format!(
            "make_divisible requires v > 0 and divisor > 0, got v={v}, divisor={divisor}"
        )));
    }
    let rounded = ((v + divisor as f64 / 2.0).floor() as usize / divisor) * divisor;
    let mut new_v = rounded.max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    Ok(new_v)
}

/// User-facing variant descriptor: width multiplier, ablation masks and
/// head options.
#[derive(Debug, Clone, PartialEq)]
pub struct LcnetConfig {
    /// Width multiplier applied to stem and block channels (not the head).
    pub scale: f32,
    /// 13 characters, `1` = that block carries an SE module.
    pub se_mask: String,
    /// 13 characters, `1` = 5x5 depthwise kernel, `0` = 3x3.
    pub kernel_mask: String,
    pub num_classes: usize,
    /// Width of the post-GAP 1x1 conv; never scaled by the multiplier.
    pub last_conv_dim: usize,
    pub dropout_rate: f32,
    pub divisor: usize,
    /// `false` swaps every H-Swish for ReLU (technique ablation).
    pub enable_hswish: bool,
    /// `false` removes the post-GAP 1x1 conv (technique ablation).
    pub enable_last_conv: bool,
}

pub const DEFAULT_SE_MASK: &str = "0000000000011";
pub const DEFAULT_KERNEL_MASK: &str = "0000001111111";

impl Default for LcnetConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            se_mask: DEFAULT_SE_MASK.to_string(),
            kernel_mask: DEFAULT_KERNEL_MASK.to_string(),
            num_classes: 1000,
            last_conv_dim: 1280,
            dropout_rate: 0.2,
            divisor: 8,
            enable_hswish: true,
            enable_last_conv: true,
        }
    }
}

/// Parses a 13-character `0`/`1` string.
pub fn parse_mask(mask: &str) -> Result<[bool; NUM_BLOCKS], ArchError> {
    if mask.len() != NUM_BLOCKS {
        return Err(ArchError::InvalidConfig(format!(
            "mask '{mask}' must be exactly {NUM_BLOCKS} characters, got {}",
            mask.len()
        )));
    }
    let mut out = [false; NUM_BLOCKS];
    for (i, ch) in mask.chars().enumerate() {
        out[i] = match ch {
            '0' => false,
            '1' => true,
            _ => {
                return Err(ArchError::InvalidConfig(format!(
                    "mask '{mask}' contains '{ch}'; only '0' and '1' are allowed"
                )))
            }
        };
    }
    Ok(out)
}

impl LcnetConfig {
    /// A config differing from default only in scale.
    pub fn with_scale(scale: f32) -> Self {
        Self {
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.scale.is_nan() || self.scale <= 0.0 || !self.scale.is_finite() {
            return Err(ArchError::InvalidConfig(format!(
                "scale must be a positive finite number, got {}",
                self.scale
            )));
        }
        parse_mask(&self.se_mask)?;
        parse_mask(&self.kernel_mask)?;
        if self.num_classes == 0 {
            return Err(ArchError::InvalidConfig("num_classes must be >= 1".into()));
        }
        if self.last_conv_dim == 0 {
            return Err(ArchError::InvalidConfig(
                "last_conv_dim must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ArchError::InvalidConfig(format!(
                "dropout_rate must satisfy 0 <= rate < 1, got {}",
                self.dropout_rate
            )));
        }
        if self.divisor == 0 {
            return Err(ArchError::InvalidConfig("divisor must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    HSwish,
    Relu,
}

/// One executable layer of the chain, with the names of the parameter
/// tensors it consumes.
#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv {
        weight: String,
        bias: Option<String>,
        desc: ConvDesc,
    },
    BatchNorm {
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
        channels: usize,
    },
    Activation(ActKind),
    Se {
        w1: String,
        b1: String,
        w2: String,
        b2: String,
        channels: usize,
        reduction: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dropout {
        rate: f32,
    },
    FullyConnected {
        weight: String,
        bias: String,
        in_dim: usize,
        out_dim: usize,
    },
}

/// A display/reporting row: a contiguous run of layers (stem, one block,
/// gap, the head pieces).
#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub label: String,
    /// Exclusive end index into the layer list.
    pub end: usize,
}

pub(crate) type ParamMap<F> = BTreeMap<String, TensorBase<F>>;

/// Ordered layer chain plus named parameter tensors. Immutable after build
/// in inference use; training mutates parameters through a single owner.
#[derive(Debug, Clone)]
pub struct Model {
    config: LcnetConfig,
    layers: Vec<Layer>,
    segments: Vec<Segment>,
    params: ParamMap<f32>,
}

/// Knobs for a single forward invocation.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Kernel-internal worker count. Results are bit-identical for any
    /// value.
    pub workers: usize,
    /// Seed for train-mode dropout masks.
    pub dropout_seed: u64,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        Self {
            workers: 1,
            dropout_seed: 0,
        }
    }
}

/// Shape of the activation leaving each reporting segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub label: String,
    pub dims: Vec<usize>,
}

/// Saved per-layer context for the backward pass.
pub(crate) enum SavedCtx<F> {
    Conv {
        input: TensorBase<F>,
    },
    BatchNorm {
        input: TensorBase<F>,
        mean: TensorBase<F>,
        var: TensorBase<F>,
        /// True when batch statistics were used (train mode).
        train_stats: bool,
    },
    Activation {
        input: TensorBase<F>,
    },
    Se {
        input: TensorBase<F>,
        parts: ops::SeParts<F>,
    },
    GlobalAvgPool {
        in_dims: Vec<usize>,
    },
    Flatten {
        in_dims: Vec<usize>,
    },
    Dropout {
        mask: Option<Vec<bool>>,
        scale: f64,
    },
    FullyConnected {
        input: TensorBase<F>,
    },
}

/// Everything a forward run produces.
pub(crate) struct ForwardRun<F> {
    /// Logits `[N, num_classes]` (softmax not yet applied).
    pub output: TensorBase<F>,
    pub trace: Vec<TraceRow>,
    /// `(param key, new value)` pairs for BN running statistics; only
    /// populated in train mode.
    pub running_updates: Vec<(String, TensorBase<F>)>,
    pub saved: Option<Vec<SavedCtx<F>>>,
}

fn get_param<'a, F: Element>(
    params: &'a ParamMap<F>,
    key: &str,
) -> Result<&'a TensorBase<F>, ArchError> {
    params
        .get(key)
        .ok_or_else(|| ArchError::MissingParam(key.to_string()))
}

fn bn_params<F: Element>(
    params: &ParamMap<F>,
    gamma: &str,
    beta: &str,
    mean: &str,
    var: &str,
) -> Result<BatchNormParams<F>, ArchError> {
    Ok(BatchNormParams {
        gamma: get_param(params, gamma)?.clone(),
        beta: get_param(params, beta)?.clone(),
        running_mean: get_param(params, mean)?.clone(),
        running_var: get_param(params, var)?.clone(),
        eps: F::from_f32(BN_EPS),
    })
}

/// The single forward implementation. Inference, training and the 64-bit
/// gradient check all go through here, so the executed graph can never
/// drift between them.
pub(crate) fn run_forward<F: Element>(
    layers: &[Layer],
    segments: &[Segment],
    params: &ParamMap<F>,
    input: &TensorBase<F>,
    mode: Mode,
    opts: &ForwardOpts,
    record_tape: bool,
) -> Result<ForwardRun<F>, ArchError> {
    let (_, c, h, w) = input
        .dims4()
        .map_err(|_| ArchError::InvalidInput("input must be [N, C, H, W]".into()))?;
    if c != 3 {
        return Err(ArchError::InvalidInput(format!(
            "input must have 3 channels, got {c}"
        )));
    }
    if h < 32 || w < 32 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(ArchError::InvalidInput(format!(
            "spatial size {h}x{w} must be >= 32 and divisible by 32"
        )));
    }

    let momentum = F::from_f32(BN_MOMENTUM);
    let mut trace = Vec::with_capacity(segments.len());
    let mut running_updates = Vec::new();
    let mut saved: Vec<SavedCtx<F>> = Vec::new();
    let mut seg_iter = segments.iter();
    let mut next_seg = seg_iter.next();

    let mut x = input.clone();
    for (li, layer) in layers.iter().enumerate() {
        x = match layer {
            Layer::Conv { weight, bias, desc } => {
                let w_t = get_param(params, weight)?;
                let b_t = match bias {
                    Some(b) => Some(get_param(params, b)?),
                    None => None,
                };
                if record_tape {
                    saved.push(SavedCtx::Conv { input: x.clone() });
                }
                conv2d_fast(&x, w_t, b_t, desc, opts.workers)?
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => {
                let bn = bn_params(params, gamma, beta, running_mean, running_var)?;
                match mode {
                    Mode::Train => {
                        let out = batchnorm_train(&x, &bn, momentum)?;
                        running_updates
                            .push((running_mean.clone(), out.new_running_mean.clone()));
                        running_updates.push((running_var.clone(), out.new_running_var.clone()));
                        if record_tape {
                            saved.push(SavedCtx::BatchNorm {
                                input: x.clone(),
                                mean: out.batch_mean.clone(),
                                var: out.batch_var.clone(),
                                train_stats: true,
                            });
                        }
                        out.output
                    }
                    Mode::Infer => {
                        if record_tape {
                            saved.push(SavedCtx::BatchNorm {
                                input: x.clone(),
                                mean: bn.running_mean.clone(),
                                var: bn.running_var.clone(),
                                train_stats: false,
                            });
                        }
                        batchnorm_infer(&x, &bn)?
                    }
                }
            }
            Layer::Activation(kind) => {
                if record_tape {
                    saved.push(SavedCtx::Activation { input: x.clone() });
                }
                match kind {
                    ActKind::HSwish => hswish(&x),
                    ActKind::Relu => relu(&x),
                }
            }
            Layer::Se {
                w1,
                b1,
                w2,
                b2,
                channels,
                reduction,
            } => {
                let se = SeParams::new(
                    *channels,
                    *reduction,
                    get_param(params, w1)?.clone(),
                    get_param(params, b1)?.clone(),
                    get_param(params, w2)?.clone(),
                    get_param(params, b2)?.clone(),
                )?;
                let parts = ops::se_forward_parts(&x, &se)?;
                let out = parts.output.clone();
                if record_tape {
                    saved.push(SavedCtx::Se {
                        input: x.clone(),
                        parts,
                    });
                }
                out
            }
            Layer::GlobalAvgPool => {
                if record_tape {
                    saved.push(SavedCtx::GlobalAvgPool {
                        in_dims: x.dims().to_vec(),
                    });
                }
                global_avg_pool(&x)?
            }
            Layer::Flatten => {
                let in_dims = x.dims().to_vec();
                let n = in_dims[0];
                let rest: usize = in_dims[1..].iter().product();
                if record_tape {
                    saved.push(SavedCtx::Flatten { in_dims });
                }
                x.reshaped(&[n, rest]).map_err(OpsError::from)?
            }
            Layer::Dropout { rate } => {
                if mode == Mode::Train && *rate > 0.0 {
                    let seed = opts.dropout_seed.wrapping_add(li as u64);
                    let mask = dropout_mask(x.len(), *rate, seed);
                    let scale = 1.0 / (1.0 - *rate as f64);
                    let scale_f = F::from_f64(scale);
                    let mut out = x.clone();
                    for (v, keep) in out.data_mut().iter_mut().zip(mask.iter()) {
                        *v = if *keep { *v * scale_f } else { F::zero() };
                    }
                    if record_tape {
                        saved.push(SavedCtx::Dropout {
                            mask: Some(mask),
                            scale,
                        });
                    }
                    out
                } else {
                    if record_tape {
                        saved.push(SavedCtx::Dropout {
                            mask: None,
                            scale: 1.0,
                        });
                    }
                    x
                }
            }
            Layer::FullyConnected { weight, bias, .. } => {
                let w_t = get_param(params, weight)?;
                let b_t = get_param(params, bias)?;
                if record_tape {
                    saved.push(SavedCtx::FullyConnected { input: x.clone() });
                }
                fully_connected(&x, w_t, b_t)?
            }
        };
        if let Some(seg) = next_seg {
            if li + 1 == seg.end {
                trace.push(TraceRow {
                    label: seg.label.clone(),
                    dims: x.dims().to_vec(),
                });
                next_seg = seg_iter.next();
            }
        }
    }

    Ok(ForwardRun {
        output: x,
        trace,
        running_updates,
        saved: record_tape.then_some(saved),
    })
}

/// A planned chain: layers, reporting segments, zero-initialized params.
pub(crate) type Plan = (Vec<Layer>, Vec<Segment>, ParamMap<f32>);

/// Plans the layer chain and segment table for a config. Returns the layers
/// together with the zero-initialized parameter map.
pub(crate) fn plan(config: &LcnetConfig) -> Result<Plan, ArchError> {
    config.validate()?;
    let se_mask = parse_mask(&config.se_mask)?;
    let kernel_mask = parse_mask(&config.kernel_mask)?;
    let table = base_block_table();
    let scale = config.scale as f64;
    let act = if config.enable_hswish {
        ActKind::HSwish
    } else {
        ActKind::Relu
    };

    let mut layers = Vec::new();
    let mut segments = Vec::new();
    let mut params: ParamMap<f32> = BTreeMap::new();
    let mut alloc = |key: &str, dims: &[usize]| {
        params.insert(key.to_string(), Tensor::zeros(dims).unwrap());
    };

    let push_conv = |layers: &mut Vec<Layer>,
                         alloc: &mut dyn FnMut(&str, &[usize]),
                         name: &str,
                         desc: ConvDesc| {
        let weight = format!("{name}.weight");
        alloc(&weight, &desc.weight_dims());
        let bias = desc.has_bias.then(|| {
            let key = format!("{name}.bias");
            alloc(&key, &[desc.out_channels]);
            key
        });
        layers.push(Layer::Conv { weight, bias, desc });
    };
    let push_bn =
        |layers: &mut Vec<Layer>, alloc: &mut dyn FnMut(&str, &[usize]), name: &str, c: usize| {
            let gamma = format!("{name}.gamma");
            let beta = format!("{name}.beta");
            let running_mean = format!("{name}.running_mean");
            let running_var = format!("{name}.running_var");
            for k in [&gamma, &beta, &running_mean, &running_var] {
                alloc(k, &[c]);
            }
            layers.push(Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                channels: c,
            });
        };

    // Stem: 3x3 stride-2 standard conv, BN, activation.
    let stem_out = make_divisible(16.0 * scale, config.divisor)?;
    push_conv(
        &mut layers,
        &mut alloc,
        "stem.conv",
        ConvDesc::new(3, stem_out, 3, 2, false, false)?,
    );
    push_bn(&mut layers, &mut alloc, "stem.bn", stem_out);
    layers.push(Layer::Activation(act));
    segments.push(Segment {
        label: "stem".into(),
        end: layers.len(),
    });

    // 13 depthwise-separable blocks.
    let mut in_c = stem_out;
    for (i, spec) in table.iter().enumerate() {
        let block = format!("blocks.{:02}", i + 1);
        let out_c = make_divisible(spec.out_c_base as f64 * scale, config.divisor)?;
        let kernel = if kernel_mask[i] { 5 } else { 3 };

        push_conv(
            &mut layers,
            &mut alloc,
            &format!("{block}.dw"),
            ConvDesc::new(in_c, in_c, kernel, spec.stride, true, false)?,
        );
        push_bn(&mut layers, &mut alloc, &format!("{block}.dw.bn"), in_c);
        layers.push(Layer::Activation(act));

        if se_mask[i] {
            // SE gates the depthwise output, before the pointwise conv.
            let mid = in_c / SE_REDUCTION;
            if mid == 0 || in_c % SE_REDUCTION != 0 {
                return Err(ArchError::InvalidConfig(format!(
                    "block {} has {in_c} channels, not divisible by SE reduction {SE_REDUCTION}",
                    i + 1
                )));
            }
            let w1 = format!("{block}.se.fc1.weight");
            let b1 = format!("{block}.se.fc1.bias");
            let w2 = format!("{block}.se.fc2.weight");
            let b2 = format!("{block}.se.fc2.bias");
            alloc(&w1, &[mid, in_c]);
            alloc(&b1, &[mid]);
            alloc(&w2, &[in_c, mid]);
            alloc(&b2, &[in_c]);
            layers.push(Layer::Se {
                w1,
                b1,
                w2,
                b2,
                channels: in_c,
                reduction: SE_REDUCTION,
            });
        }

        push_conv(
            &mut layers,
            &mut alloc,
            &format!("{block}.pw"),
            ConvDesc::new(in_c, out_c, 1, 1, false, false)?,
        );
        push_bn(&mut layers, &mut alloc, &format!("{block}.pw.bn"), out_c);
        layers.push(Layer::Activation(act));

        segments.push(Segment {
            label: format!("block_{:02}", i + 1),
            end: layers.len(),
        });
        in_c = out_c;
    }

    layers.push(Layer::GlobalAvgPool);
    segments.push(Segment {
        label: "gap".into(),
        end: layers.len(),
    });

    let mut feature_dim = in_c;
    if config.enable_last_conv {
        // 1x1 conv marked NBN: bias instead of batch norm.
        push_conv(
            &mut layers,
            &mut alloc,
            "head.conv",
            ConvDesc::new(in_c, config.last_conv_dim, 1, 1, false, true)?,
        );
        layers.push(Layer::Activation(act));
        segments.push(Segment {
            label: "last_conv".into(),
            end: layers.len(),
        });
        feature_dim = config.last_conv_dim;
    }

    layers.push(Layer::Flatten);
    layers.push(Layer::Dropout {
        rate: config.dropout_rate,
    });
    let fc_w = "head.fc.weight".to_string();
    let fc_b = "head.fc.bias".to_string();
    alloc(&fc_w, &[config.num_classes, feature_dim]);
    alloc(&fc_b, &[config.num_classes]);
    layers.push(Layer::FullyConnected {
        weight: fc_w,
        bias: fc_b,
        in_dim: feature_dim,
        out_dim: config.num_classes,
    });
    segments.push(Segment {
        label: "fc".into(),
        end: layers.len(),
    });

    Ok((layers, segments, params))
}

/// Builds a model for `config` with parameters deterministically
/// initialized from `seed`.
pub fn build_model(config: &LcnetConfig, seed: u64) -> Result<Model, ArchError> {
    let (layers, segments, params) = plan(config)?;
    let mut model = Model {
        config: config.clone(),
        layers,
        segments,
        params,
    };
    weights::init_params(&mut model, seed);
    Ok(model)
}

impl Model {
    pub fn config(&self) -> &LcnetConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Forward pass with default options (single worker). Inference mode
    /// applies softmax, train mode returns logits.
    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor, ArchError> {
        self.forward_opts(input, mode, &ForwardOpts::default())
    }

    pub fn forward_opts(
        &self,
        input: &Tensor,
        mode: Mode,
        opts: &ForwardOpts,
    ) -> Result<Tensor, ArchError> {
        Ok(self.forward_traced(input, mode, opts)?.0)
    }

    /// Forward pass that also reports the output shape of every reporting
    /// segment (stem, each block, gap, head pieces).
    pub fn forward_traced(
        &self,
        input: &Tensor,
        mode: Mode,
        opts: &ForwardOpts,
    ) -> Result<(Tensor, Vec<TraceRow>), ArchError> {
        let run = run_forward(
            &self.layers,
            &self.segments,
            &self.params,
            input,
            mode,
            opts,
            false,
        )?;
        let out = match mode {
            Mode::Infer => softmax(&run.output)?,
            Mode::Train => run.output,
        };
        Ok((out, run.trace))
    }

    /// Replaces all parameters from a named tensor map. Both directions are
    /// checked: every model parameter must be present with the right shape,
    /// and no extra tensors are allowed.
    pub fn load_params(&mut self, map: BTreeMap<String, Tensor>) -> Result<(), ArchError> {
        for key in map.keys() {
            if !self.params.contains_key(key) {
                return Err(ArchError::InvalidInput(format!(
                    "tensor '{key}' does not belong to this architecture"
                )));
            }
        }
        for (key, tensor) in &self.params {
            match map.get(key) {
                None => return Err(ArchError::MissingParam(key.clone())),
                Some(t) if t.dims() != tensor.dims() => {
                    return Err(ArchError::InvalidInput(format!(
                        "tensor '{key}' has shape {:?}, expected {:?}",
                        t.dims(),
                        tensor.dims()
                    )));
                }
                Some(_) => {}
            }
        }
        self.params = map;
        Ok(())
    }

    /// Applies BN running-statistic updates produced by a training forward.
    pub fn apply_running_updates(&mut self, updates: &[(String, Tensor)]) {
        for (key, value) in updates {
            self.params.insert(key.clone(), value.clone());
        }
    }

    /// Returns true if `key` names a trainable parameter (running stats are
    /// state, not parameters).
    pub fn is_trainable(key: &str) -> bool {
        !key.ends_with(".running_mean") && !key.ends_with(".running_var")
    }

    /// Parameters exempt from weight decay: biases and BN affine terms.
    pub fn is_decay_exempt(key: &str) -> bool {
        key.ends_with(".bias") || key.ends_with(".gamma") || key.ends_with(".beta")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn make_divisible_examples() {
        assert_eq!(make_divisible(8.0, 8).unwrap(), 8);
        assert_eq!(make_divisible(4.0, 8).unwrap(), 8);
        assert_eq!(make_divisible(384.0, 8).unwrap(), 384);
        // anti-shrink guard: 32 * 0.35 = 11.2 rounds to 8, guard bumps to 16
        assert_eq!(make_divisible(11.2, 8).unwrap(), 16);
        // 16 * 0.75 = 12 rounds up to 16
        assert_eq!(make_divisible(12.0, 8).unwrap(), 16);
        assert!(make_divisible(0.0, 8).is_err());
        assert!(make_divisible(-3.0, 8).is_err());
        assert!(make_divisible(5.0, 0).is_err());
    }

    #[test]
    fn base_table_shape() {
        let table = base_block_table();
        assert_eq!(table.len(), 13);
        // SE on the last two blocks only
        for (i, row) in table.iter().enumerate() {
            assert_eq!(row.use_se, i >= 11, "row {i}");
            assert_eq!(row.kernel == 5, i >= 6, "row {i}");
        }
        // channel chain is consistent
        let mut prev = 16;
        for row in &table {
            assert_eq!(row.in_c_base, prev);
            prev = row.out_c_base;
        }
        assert_eq!(prev, 512);
        // default masks reproduce the base table
        let se = parse_mask(DEFAULT_SE_MASK).unwrap();
        let k = parse_mask(DEFAULT_KERNEL_MASK).unwrap();
        for (i, row) in table.iter().enumerate() {
            assert_eq!(se[i], row.use_se);
            assert_eq!(k[i], row.kernel == 5);
        }
    }

    #[test]
    fn mask_parsing() {
        assert!(parse_mask("111").is_err());
        assert!(parse_mask("000000000001x").is_err());
        assert!(parse_mask("1000000000001").unwrap()[0]);
    }

    #[test]
    fn build_rejects_bad_masks() {
        let cfg = LcnetConfig {
            se_mask: "101".into(),
            ..Default::default()
        };
        assert!(matches!(
            build_model(&cfg, 0),
            Err(ArchError::InvalidConfig(_))
        ));
    }

    #[test]
    fn block_layer_pattern_is_dw_bn_act_se_pw_bn_act() {
        let model = build_model(&LcnetConfig::default(), 0).unwrap();
        let segs = model.segments();
        let layers = model.layers();
        // block 13 (carries SE): depthwise conv, BN, act, SE, pointwise
        // conv, BN, act
        let start = segs[12].end;
        let end = segs[13].end;
        assert_eq!(end - start, 7);
        let block = &layers[start..end];
        assert!(matches!(&block[0], Layer::Conv { desc, .. } if desc.depthwise));
        assert!(matches!(&block[1], Layer::BatchNorm { .. }));
        assert!(matches!(&block[2], Layer::Activation(_)));
        assert!(matches!(&block[3], Layer::Se { channels: 512, .. }));
        assert!(
            matches!(&block[4], Layer::Conv { desc, .. } if !desc.depthwise && desc.kernel == 1)
        );
        assert!(matches!(&block[5], Layer::BatchNorm { .. }));
        assert!(matches!(&block[6], Layer::Activation(_)));
        // block 1 (no SE) is the same minus the SE layer
        let b1 = &layers[segs[0].end..segs[1].end];
        assert_eq!(b1.len(), 6);
        assert!(matches!(&b1[0], Layer::Conv { desc, .. } if desc.depthwise));
        assert!(matches!(&b1[3], Layer::Conv { desc, .. } if !desc.depthwise));
    }

    #[test]
    fn no_se_mask_means_no_se_layers() {
        let cfg = LcnetConfig {
            scale: 0.25,
            se_mask: "0000000000000".into(),
            num_classes: 10,
            ..Default::default()
        };
        let model = build_model(&cfg, 0).unwrap();
        assert!(!model
            .layers()
            .iter()
            .any(|l| matches!(l, Layer::Se { .. })));
        assert!(!model.params().keys().any(|k| k.contains(".se.")));
    }

    #[test]
    fn relu_config_has_no_hswish() {
        let cfg = LcnetConfig {
            scale: 0.25,
            enable_hswish: false,
            num_classes: 5,
            ..Default::default()
        };
        let model = build_model(&cfg, 0).unwrap();
        assert!(model
            .layers()
            .iter()
            .all(|l| !matches!(l, Layer::Activation(ActKind::HSwish))));
    }

    #[test]
    fn infer_output_is_probabilities() {
        let cfg = LcnetConfig {
            scale: 0.25,
            num_classes: 7,
            ..Default::default()
        };
        let model = build_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(
            &[2, 3, 32, 32],
            (0..2 * 3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = model.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.dims(), &[2, 7]);
        for n in 0..2 {
            let row_sum: f32 = y.data()[n * 7..(n + 1) * 7].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6, "row sum {row_sum}");
        }
        // infer mode twice: bit-identical
        let y2 = model.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn forward_rejects_bad_spatial_size() {
        let cfg = LcnetConfig {
            scale: 0.25,
            num_classes: 3,
            ..Default::default()
        };
        let model = build_model(&cfg, 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 30, 30]).unwrap();
        assert!(matches!(
            model.forward(&x, Mode::Infer),
            Err(ArchError::InvalidInput(_))
        ));
        let x = Tensor::zeros(&[1, 4, 32, 32]).unwrap();
        assert!(model.forward(&x, Mode::Infer).is_err());
    }

    #[test]
    fn load_params_validates_both_directions() {
        let cfg = LcnetConfig {
            scale: 0.25,
            num_classes: 3,
            ..Default::default()
        };
        let model = build_model(&cfg, 0).unwrap();

        let mut short = model.params().clone();
        short.remove("head.fc.bias");
        let mut m2 = model.clone();
        assert!(matches!(
            m2.load_params(short),
            Err(ArchError::MissingParam(_))
        ));

        let mut extra = model.params().clone();
        extra.insert("bogus".into(), Tensor::zeros(&[1]).unwrap());
        assert!(m2.load_params(extra).is_err());

        let mut bad_shape = model.params().clone();
        bad_shape.insert("head.fc.bias".into(), Tensor::zeros(&[7]).unwrap());
        assert!(m2.load_params(bad_shape).is_err());

        let ok = model.params().clone();
        assert!(m2.load_params(ok).is_ok());
    }
}
