//! Dense row-major tensors.
//!
//! Everything in this crate moves through [`Tensor`], a contiguous NCHW
//! 32-bit float buffer. Activations are `[N, C, H, W]`, convolution weights
//! are `[Cout, Cin_per_group, Kh, Kw]`, vectors are `[len]`. There are no
//! views, no broadcasting and no strides: every op allocates a fresh
//! contiguous output, which keeps kernel contracts auditable.
//!
//! [`TensorBase`] is generic over the element type so the gradient checker
//! can rerun the exact same code in 64-bit precision; model data is always
//! `f32`.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Scalar types tensors can carry. Implemented for `f32` (model data) and
/// `f64` (gradient checking only).
pub trait Element:
    Float + num_traits::NumAssign + Copy + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("invalid shape {dims:?}: {reason}")]
    InvalidShape { dims: Vec<usize>, reason: String },
    #[error("index {index} out of bounds for axis {axis} with extent {extent}")]
    OutOfBounds {
        axis: usize,
        index: usize,
        extent: usize,
    },
    #[error("index rank {got} does not match tensor rank {expected}")]
    RankMismatch { got: usize, expected: usize },
    #[error("data length {got} does not match shape product {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// Checks shape invariants and returns the element count.
fn checked_len(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() {
        return Err(TensorError::InvalidShape {
            dims: dims.to_vec(),
            reason: "dims must be non-empty".into(),
        });
    }
    let mut len: usize = 1;
    for &d in dims {
        if d == 0 {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "every extent must be >= 1".into(),
            });
        }
        len = len.checked_mul(d).ok_or_else(|| TensorError::InvalidShape {
            dims: dims.to_vec(),
            reason: "shape product overflows usize".into(),
        })?;
    }
    Ok(len)
}

/// Row-major flat offset of `index` within `dims`.
///
/// For a 4-D tensor this is the layout formula
/// `((n*C + c)*H + h)*W + w`; the general form folds left-to-right.
pub fn row_major_offset(dims: &[usize], index: &[usize]) -> Result<usize, TensorError> {
    if index.len() != dims.len() {
        return Err(TensorError::RankMismatch {
            got: index.len(),
            expected: dims.len(),
        });
    }
    let mut off = 0usize;
    for (axis, (&i, &d)) in index.iter().zip(dims.iter()).enumerate() {
        if i >= d {
            return Err(TensorError::OutOfBounds {
                axis,
                index: i,
                extent: d,
            });
        }
        off = off * d + i;
    }
    Ok(off)
}

/// Contiguous row-major tensor over an [`Element`] type.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<E> {
    dims: Vec<usize>,
    data: Vec<E>,
}

/// The crate-wide value carrier: a 32-bit float [`TensorBase`].
pub type Tensor = TensorBase<f32>;

impl<E: Element> TensorBase<E> {
    /// Tensor of the given shape with every element equal to `fill`.
    pub fn filled(dims: &[usize], fill: E) -> Result<Self, TensorError> {
        let len = checked_len(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![fill; len],
        })
    }

    /// All-zeros tensor.
    pub fn zeros(dims: &[usize]) -> Result<Self, TensorError> {
        Self::filled(dims, E::zero())
    }

    /// Wraps an existing buffer; the length must match the shape product.
    pub fn from_vec(dims: &[usize], data: Vec<E>) -> Result<Self, TensorError> {
        let len = checked_len(dims)?;
        if data.len() != len {
            return Err(TensorError::LengthMismatch {
                got: data.len(),
                expected: len,
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Row-major flat offset of an index tuple, bounds-checked per axis.
    pub fn offset(&self, index: &[usize]) -> Result<usize, TensorError> {
        row_major_offset(&self.dims, index)
    }

    /// Element accessor going through [`Self::offset`].
    pub fn at(&self, index: &[usize]) -> Result<E, TensorError> {
        Ok(self.data[self.offset(index)?])
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::RankMismatch {
                got: self.dims.len(),
                expected: 4,
            }),
        }
    }

    /// Approximate equality: shapes match and every pair satisfies
    /// `|a - b| <= atol + rtol * |b|`. A shape mismatch is `false`, not an
    /// error. NaN anywhere makes the comparison fail.
    pub fn allclose(&self, other: &Self, rtol: E, atol: E) -> bool {
        if self.dims != other.dims {
            return false;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .all(|(&a, &b)| (a - b).abs() <= atol + rtol * b.abs())
    }

    /// Same shape, data converted element-wise to `f64`.
    pub fn widen(&self) -> TensorBase<f64> {
        TensorBase {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v.to_f64()).collect(),
        }
    }

    /// Reinterprets the buffer under a new shape with the same length.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self, TensorError> {
        Self::from_vec(dims, self.data.clone())
    }

    /// Largest absolute element, 0 for the empty case (cannot occur).
    pub fn max_abs(&self) -> E {
        self.data
            .iter()
            .fold(E::zero(), |acc, &v| acc.max(v.abs()))
    }
}

impl TensorBase<f64> {
    /// Narrows a 64-bit tensor back to model precision.
    pub fn narrow_f32(&self) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}
