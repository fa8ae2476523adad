//! Controlled text generation with attribute-specific adapters on a frozen
//! transformer language model.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode differentiation.
//! - [`model`]: a small autoregressive transformer trained from scratch.
//! - [`adapters`]: per-attribute bottleneck adapters at every attention and
//!   feed-forward site, zero-initialized so step 0 is exactly the base model.
//! - [`fusion`]: temperature-gated softmax that mixes the attribute adapters
//!   at each insertion site according to a continuous control code.
//! - [`classifier`]: a small encoder whose pre-softmax logits are the control
//!   codes; also pseudo-labels unlabeled text.
//! - [`pipeline`]: the three training stages (base model, classifier,
//!   adapters+gates) with a reproducibility manifest.
//! - [`generation`]: top-k controlled decoding.
//! - [`evaluation`]: relevance/correctness/perplexity/distinct-n metrics and
//!   report rendering.
//! - [`corpus`], [`checkpoint`], [`config`]: corpus files, the binary
//!   checkpoint format, and run configuration.

pub mod adapters;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod fusion;
pub mod generation;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod vocab;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, TensorError, TensorId};
