//! Desk-scale laboratory for comparing bottleneck-adapter tuning with full
//! fine-tuning of transformer encoders.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, a reverse-mode tape and a
//!   finite-difference gradient checker.
//! * [`model`]: a post-norm transformer encoder with optional adapters
//!   after the attention and feed-forward sublayers.
//! * [`data`]: whitespace tokenization, TSV datasets, MLM masking and the
//!   synthetic keyword tasks used for experiments.
//! * [`tuning`]: Adam with a linear schedule, tuning policies, Mixout,
//!   supervised training with dev-based checkpoint selection and TAPT.
//! * [`analysis`]: RSA, loss-landscape interpolation, learning-rate sweeps
//!   and weight-deviation reports.

pub mod analysis;
pub mod data;
mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
