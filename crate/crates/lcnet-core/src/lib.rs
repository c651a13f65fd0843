//! From-scratch CPU inference engine, cost analyzer and architecture
//! laboratory for the PP-LCNet lightweight CNN family.
//!
//! The crate is organized around a small set of layers:
//!
//! * [`tensor`] — contiguous row-major NCHW tensors.
//! * [`ops`] — forward kernels for every layer type, each optimized
//!   implementation bound to a naive oracle by an equivalence contract.
//! * [`arch`] — the 13-block stage table as data, width scaling, SE and
//!   kernel-size ablation masks, and the executable [`Model`].
//! * [`analysis`] — per-layer parameter and MAC accounting.
//! * [`weights`] — deterministic initialization and a bit-exact binary
//!   container for parameters (`.lcnw`) and standalone tensors (`.lct`).
//! * [`autodiff`] — hand-written reverse-mode gradients validated against
//!   64-bit central finite differences.
//! * [`train`] — SGD + momentum, cosine schedule with warmup, and a toy
//!   synthetic-data training loop.

// Kernels and backward rules are written as explicit indexed loops.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod arch;
pub mod autodiff;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod weights;

pub use arch::{build_model, LcnetConfig, Model};
pub use ops::Mode;
pub use tensor::Tensor;
