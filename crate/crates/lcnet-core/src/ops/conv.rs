//! 2-D convolution kernels.
//!
//! Two implementations share one contract:
//!
//! * [`conv2d_naive`] — direct 7-loop summation over the receptive field.
//!   Slow, obviously correct, and the oracle every other path is tested
//!   against.
//! * [`conv2d_fast`] — the production path. Depthwise convolutions run as
//!   direct per-channel loops, 1x1 stride-1 convolutions as a plain GEMM
//!   over the input, and everything else as im2col + GEMM.
//!
//! Both must agree within `rtol 1e-4 / atol 1e-5` on all valid inputs, and
//! [`conv2d_fast`] must produce bit-identical output for any worker count:
//! workers only partition disjoint output ranges, the per-element
//! accumulation order never changes.

use crate::ops::OpsError;
use crate::tensor::{Element, TensorBase};

/// Static description of a convolution layer.
///
/// Padding is always `(kernel - 1) / 2` (SAME-style), which is what keeps
/// the published spatial chain intact at every stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDesc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub has_bias: bool,
}

impl ConvDesc {
    /// Validated constructor; `padding` is derived, not chosen.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        depthwise: bool,
        has_bias: bool,
    ) -> Result<Self, OpsError> {
        if !matches!(kernel, 1 | 3 | 5) {
            return Err(OpsError::InvalidDesc(format!(
                "kernel must be 1, 3 or 5, got {kernel}"
            )));
        }
        if !matches!(stride, 1 | 2) {
            return Err(OpsError::InvalidDesc(format!(
                "stride must be 1 or 2, got {stride}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(OpsError::InvalidDesc(
                "channel counts must be positive".into(),
            ));
        }
        if depthwise && in_channels != out_channels {
            return Err(OpsError::InvalidDesc(format!(
                "depthwise requires in_channels == out_channels, got {in_channels} != {out_channels}"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            depthwise,
            has_bias,
        })
    }

    /// `H' = floor((H + 2*pad - k) / stride) + 1`, same for `W'`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), OpsError> {
        let span = self.kernel;
        let h_in = h + 2 * self.padding;
        let w_in = w + 2 * self.padding;
        if h_in < span || w_in < span {
            return Err(OpsError::ShapeMismatch(format!(
                "input {h}x{w} too small for kernel {span}"
            )));
        }
        Ok(((h_in - span) / self.stride + 1, (w_in - span) / self.stride + 1))
    }

    /// Expected weight shape: `[Cout, Cin, k, k]`, or `[C, 1, k, k]` when
    /// depthwise.
    pub fn weight_dims(&self) -> [usize; 4] {
        if self.depthwise {
            [self.out_channels, 1, self.kernel, self.kernel]
        } else {
            [
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ]
        }
    }

    fn validate<F: Element>(
        &self,
        input: &TensorBase<F>,
        weights: &TensorBase<F>,
        bias: Option<&TensorBase<F>>,
    ) -> Result<(usize, usize, usize, usize), OpsError> {
        let (n, c, h, w) = input.dims4().map_err(OpsError::from)?;
        if c != self.in_channels {
            return Err(OpsError::ShapeMismatch(format!(
                "input has {c} channels, descriptor expects {}",
                self.in_channels
            )));
        }
        if weights.dims() != self.weight_dims() {
            return Err(OpsError::ShapeMismatch(format!(
                "weight shape {:?} does not match descriptor {:?}",
                weights.dims(),
                self.weight_dims()
            )));
        }
        match (bias, self.has_bias) {
            (Some(b), true) => {
                if b.dims() != [self.out_channels] {
                    return Err(OpsError::ShapeMismatch(format!(
                        "bias shape {:?}, expected [{}]",
                        b.dims(),
                        self.out_channels
                    )));
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(OpsError::ShapeMismatch(
                    "bias given but descriptor has has_bias = false".into(),
                ))
            }
            (None, true) => {
                return Err(OpsError::ShapeMismatch(
                    "descriptor has has_bias = true but no bias given".into(),
                ))
            }
        }
        Ok((n, c, h, w))
    }
}

/// Reference convolution: direct summation over the zero-padded receptive
/// field. This is the correctness oracle for [`conv2d_fast`].
pub fn conv2d_naive<F: Element>(
    input: &TensorBase<F>,
    weights: &TensorBase<F>,
    bias: Option<&TensorBase<F>>,
    desc: &ConvDesc,
) -> Result<TensorBase<F>, OpsError> {
    let (n_batch, _, h, w) = desc.validate(input, weights, bias)?;
    let (out_h, out_w) = desc.output_hw(h, w)?;
    let k = desc.kernel;
    let stride = desc.stride;
    let pad = desc.padding as isize;
    let cin_per_group = if desc.depthwise { 1 } else { desc.in_channels };

    let x = input.data();
    let wts = weights.data();
    let mut out =
        TensorBase::zeros(&[n_batch, desc.out_channels, out_h, out_w]).map_err(OpsError::from)?;
    let o = out.data_mut();

    let in_hw = h * w;
    let out_hw = out_h * out_w;
    for n in 0..n_batch {
        for co in 0..desc.out_channels {
            let w_base = co * cin_per_group * k * k;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = F::zero();
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
                                let xv = x[x_base + ih as usize * w + iw as usize];
                                let wv = wts[w_base + (ci_local * k + kh) * k + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[co];
                    }
                    o[(n * desc.out_channels + co) * out_hw + oh * out_w + ow] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Splits `items` work units across up to `workers` threads, handing each
/// thread a contiguous disjoint range. `f(start, len)` must only touch the
/// output region it owns; with that, results cannot depend on the worker
/// count.
fn run_partitioned<'env, F>(workers: usize, items: usize, f: F)
where
    F: Fn(usize, usize) + Send + Sync + 'env,
{
    let workers = workers.max(1).min(items.max(1));
    if workers <= 1 || items <= 1 {
        f(0, items);
        return;
    }
    let per = items.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut start = 0;
        while start < items {
            let len = per.min(items - start);
            let f = &f;
            scope.spawn(move || f(start, len));
            start += len;
        }
    });
}

/// `out[m x n] += a[m x k] * b[k x n]`, row partitioned across workers.
/// `out` must be zeroed on entry. Accumulation per output element walks k
/// in ascending order regardless of partitioning.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_accumulate<F: Element>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    row_bias: Option<&[F]>,
    workers: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);

    let out_ptr = SendPtr(out.as_mut_ptr());
    run_partitioned(workers, m, move |row0, rows| {
        // Each invocation owns rows [row0, row0 + rows); ranges are disjoint.
        let out_slice =
            unsafe { std::slice::from_raw_parts_mut(out_ptr.get().add(row0 * n), rows * n) };
        for (ri, out_row) in out_slice.chunks_mut(n).enumerate() {
            let i = row0 + ri;
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &b[kk * n..kk * n + n];
                for (oj, &bj) in out_row.iter_mut().zip(b_row.iter()) {
                    *oj += aik * bj;
                }
            }
            if let Some(bias) = row_bias {
                let bi = bias[i];
                for oj in out_row.iter_mut() {
                    *oj += bi;
                }
            }
        }
    });
}

/// Raw pointer wrapper so disjoint output ranges can cross thread
/// boundaries. Safety rests on `run_partitioned` handing out
/// non-overlapping ranges. Accessed through a method so closures capture
/// the wrapper, not the bare pointer field.
#[derive(Clone, Copy)]
struct SendPtr<F>(*mut F);
unsafe impl<F: Send> Send for SendPtr<F> {}
unsafe impl<F: Send> Sync for SendPtr<F> {}

impl<F> SendPtr<F> {
    fn get(self) -> *mut F {
        self.0
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C*k*k, out_h*out_w]` patch
/// matrix, zero-filling out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Element>(
    sample: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    col: &mut [F],
) {
    debug_assert_eq!(col.len(), c * k * k * out_h * out_w);
    let out_hw = out_h * out_w;
    let pad = pad as isize;
    for ci in 0..c {
        let x_base = ci * h * w;
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * out_hw;
                for oh in 0..out_h {
                    let ih = (oh * stride + kh) as isize - pad;
                    let dst = &mut col[row + oh * out_w..row + oh * out_w + out_w];
                    if ih < 0 || ih >= h as isize {
                        for v in dst.iter_mut() {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let src_row = x_base + ih as usize * w;
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kw) as isize - pad;
                        *v = if iw < 0 || iw >= w as isize {
                            F::zero()
                        } else {
                            sample[src_row + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Production convolution. Same contract as [`conv2d_naive`]; strategy is
/// chosen per descriptor (depthwise direct / 1x1 GEMM / im2col + GEMM).
pub fn conv2d_fast<F: Element>(
    input: &TensorBase<F>,
    weights: &TensorBase<F>,
    bias: Option<&TensorBase<F>>,
    desc: &ConvDesc,
    workers: usize,
) -> Result<TensorBase<F>, OpsError> {
    let (n_batch, _, h, w) = desc.validate(input, weights, bias)?;
    let (out_h, out_w) = desc.output_hw(h, w)?;
    let out_hw = out_h * out_w;
    let mut out =
        TensorBase::zeros(&[n_batch, desc.out_channels, out_h, out_w]).map_err(OpsError::from)?;

    if desc.depthwise {
        depthwise_direct(input, weights, bias, desc, (out_h, out_w), &mut out, workers);
        return Ok(out);
    }

    let x = input.data();
    let in_chw = desc.in_channels * h * w;
    let bias_slice = bias.map(|b| b.data());

    if desc.kernel == 1 && desc.stride == 1 {
        // 1x1 stride 1: the input already is the patch matrix.
        for n in 0..n_batch {
            let sample = &x[n * in_chw..(n + 1) * in_chw];
            let out_sample = &mut out.data_mut()
                [n * desc.out_channels * out_hw..(n + 1) * desc.out_channels * out_hw];
            gemm_accumulate(
                weights.data(),
                sample,
                out_sample,
                desc.out_channels,
                desc.in_channels,
                out_hw,
                bias_slice,
                workers,
            );
        }
        return Ok(out);
    }

    let k = desc.kernel;
    let col_rows = desc.in_channels * k * k;
    let mut col = vec![F::zero(); col_rows * out_hw];
    for n in 0..n_batch {
        let sample = &x[n * in_chw..(n + 1) * in_chw];
        im2col(
            sample,
            desc.in_channels,
            h,
            w,
            k,
            desc.stride,
            desc.padding,
            out_h,
            out_w,
            &mut col,
        );
        let out_sample = &mut out.data_mut()
            [n * desc.out_channels * out_hw..(n + 1) * desc.out_channels * out_hw];
        gemm_accumulate(
            weights.data(),
            &col,
            out_sample,
            desc.out_channels,
            col_rows,
            out_hw,
            bias_slice,
            workers,
        );
    }
    Ok(out)
}

fn depthwise_direct<F: Element>(
    input: &TensorBase<F>,
    weights: &TensorBase<F>,
    bias: Option<&TensorBase<F>>,
    desc: &ConvDesc,
    out_hw2: (usize, usize),
    out: &mut TensorBase<F>,
    workers: usize,
) {
    let (n_batch, c, h, w) = input.dims4().expect("validated");
    let (out_h, out_w) = out_hw2;
    let out_hw = out_h * out_w;
    let k = desc.kernel;
    let stride = desc.stride;
    let pad = desc.padding as isize;
    let x = input.data();
    let wts = weights.data();
    let bias_slice = bias.map(|b| b.data());

    let total_maps = n_batch * c;
    let out_ptr = SendPtr(out.data_mut().as_mut_ptr());
    run_partitioned(workers, total_maps, move |map0, maps| {
        let dst =
            unsafe { std::slice::from_raw_parts_mut(out_ptr.get().add(map0 * out_hw), maps * out_hw) };
        for (mi, out_map) in dst.chunks_mut(out_hw).enumerate() {
            let map = map0 + mi;
            let ci = map % c;
            let x_base = map * h * w;
            let w_base = ci * k * k;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = F::zero();
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
                            acc += x[x_base + ih as usize * w + iw as usize]
                                * wts[w_base + kh * k + kw];
                        }
                    }
                    if let Some(b) = bias_slice {
                        acc += b[ci];
                    }
                    out_map[oh * out_w + ow] = acc;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(dims: &[usize]) -> Tensor {
        Tensor::filled(dims, 1.0).unwrap()
    }

    #[test]
    fn naive_all_ones_3x3() {
        let desc = ConvDesc::new(1, 1, 3, 1, false, false).unwrap();
        let out = conv2d_naive(&ones(&[1, 1, 3, 3]), &ones(&[1, 1, 3, 3]), None, &desc).unwrap();
        // zero padding: corners see 4 taps, edges 6, center 9
        assert_eq!(
            out.data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn naive_identity_pointwise() {
        let desc = ConvDesc::new(3, 3, 1, 1, false, false).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 1, 1]).unwrap();
        for c in 0..3 {
            let off = w.offset(&[c, c, 0, 0]).unwrap();
            w.data_mut()[off] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(
            &[1, 3, 4, 4],
            (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let out = conv2d_naive(&x, &w, None, &desc).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn stem_output_shape_matches_stage_table() {
        let desc = ConvDesc::new(3, 16, 3, 2, false, false).unwrap();
        assert_eq!(desc.output_hw(224, 224).unwrap(), (112, 112));
        let x = Tensor::zeros(&[1, 3, 224, 224]).unwrap();
        let w = Tensor::zeros(&[16, 3, 3, 3]).unwrap();
        let out = conv2d_fast(&x, &w, None, &desc, 1).unwrap();
        assert_eq!(out.dims(), &[1, 16, 112, 112]);
    }

    #[test]
    fn fast_matches_naive_on_examples() {
        let desc = ConvDesc::new(1, 1, 3, 1, false, false).unwrap();
        let naive =
            conv2d_naive(&ones(&[1, 1, 3, 3]), &ones(&[1, 1, 3, 3]), None, &desc).unwrap();
        let fast =
            conv2d_fast(&ones(&[1, 1, 3, 3]), &ones(&[1, 1, 3, 3]), None, &desc, 1).unwrap();
        assert!(fast.allclose(&naive, 1e-4, 1e-5));
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Option<Tensor>, ConvDesc) {
        let kernel = [1usize, 3, 5][rng.gen_range(0..3)];
        let stride = [1usize, 2][rng.gen_range(0..2)];
        let depthwise = rng.gen_bool(0.5);
        let cin = rng.gen_range(1..=8);
        let cout = if depthwise { cin } else { rng.gen_range(1..=8) };
        let has_bias = rng.gen_bool(0.5);
        let n = rng.gen_range(1..=2);
        let h = rng.gen_range(kernel..=14);
        let w = rng.gen_range(kernel..=14);
        let desc = ConvDesc::new(cin, cout, kernel, stride, depthwise, has_bias).unwrap();
        let rand_t = |rng: &mut ChaCha8Rng, dims: &[usize]| {
            let len: usize = dims.iter().product();
            Tensor::from_vec(dims, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_t(rng, &[n, cin, h, w]);
        let wt = rand_t(rng, &desc.weight_dims());
        let b = has_bias.then(|| rand_t(rng, &[cout]));
        (x, wt, b, desc)
    }

    #[test]
    fn fast_matches_naive_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let (x, w, b, desc) = random_case(&mut rng);
            let naive = conv2d_naive(&x, &w, b.as_ref(), &desc).unwrap();
            let fast = conv2d_fast(&x, &w, b.as_ref(), &desc, 1).unwrap();
            assert!(
                fast.allclose(&naive, 1e-4, 1e-5),
                "mismatch for desc {desc:?}"
            );
        }
    }

    #[test]
    fn fast_is_worker_count_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (x, w, b, desc) = random_case(&mut rng);
            let one = conv2d_fast(&x, &w, b.as_ref(), &desc, 1).unwrap();
            for workers in [2, 3, 8] {
                let many = conv2d_fast(&x, &w, b.as_ref(), &desc, workers).unwrap();
                assert_eq!(one.data(), many.data(), "workers={workers} not bit-identical");
            }
        }
    }

    #[test]
    fn desc_rejects_bad_parameters() {
        assert!(ConvDesc::new(3, 8, 2, 1, false, false).is_err());
        assert!(ConvDesc::new(3, 8, 3, 3, false, false).is_err());
        assert!(ConvDesc::new(3, 8, 3, 1, true, false).is_err());
    }

    #[test]
    fn mismatched_weight_shape_is_rejected() {
        let desc = ConvDesc::new(3, 8, 3, 1, false, false).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]).unwrap();
        let w = Tensor::zeros(&[8, 3, 5, 5]).unwrap();
        assert!(matches!(
            conv2d_naive(&x, &w, None, &desc),
            Err(OpsError::ShapeMismatch(_))
        ));
    }
}
