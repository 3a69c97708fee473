//! Core engine for a constant-size, spatially-indexed recurrent memory.
//!
//! The crate is organized around four layers:
//!
//! * [`tensor`] — a minimal dense-tensor engine with reverse-mode
//!   differentiation (a Wengert tape of boxed backward closures) and a
//!   finite-difference gradient checker.
//! * [`memory`] — the fixed-capacity memory bank with interchangeable
//!   slot-replacement policies behind the [`memory::UpdatePolicy`] trait:
//!   a learned Gumbel-Softmax policy plus six rule-based baselines,
//!   selected by name at runtime.
//! * [`attention`] — key/value projection and the dense space-time read
//!   in which every query pixel attends over all pixels of all slots.
//! * [`model`] — desk-scale encoders, the upsampling decoder, and the
//!   recurrent step functions for segmentation tracking and next-frame
//!   prediction.
//!
//! [`checkpoint`] holds the binary parameter container shared by all
//! layers; [`optim`] a plain Adam implementation.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{GradientTape, Gradients, Tensor};
