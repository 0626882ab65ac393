//! Contrastive pre-training with a low-rank prior on multi-view features.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`svd`]: dense `f64` numerics with a
//!   reverse-mode tape, including a differentiable nuclear norm.
//! - [`encoder`]: query/key MLP encoders with momentum tracking.
//! - [`queue`]: the FIFO bank of negative keys.
//! - [`losses`]: InfoNCE, the prior family, per-instance, batch and
//!   batchwise-centred low-rank losses.
//! - [`data`]: synthetic datasets, the dataset file format and deterministic
//!   view augmentation.
//! - [`trainer`]: configuration, schedules, the training loop, checkpoints and
//!   metrics.
//! - [`eval`]: linear probe, held-out nuclear-norm statistics and the
//!   gradient-stationarity report.

// Negated comparisons below are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod queue;
pub mod svd;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use svd::{svd, SvdResult};
pub use tensor::Tensor;
