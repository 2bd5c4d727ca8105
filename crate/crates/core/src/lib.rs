//! Dual-objective convolutional autoencoder for content-based retrieval of
//! tumoural brain MRI slices.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays and a per-step reverse-mode graph.
//! - [`nn`]: batch norm, dropout, separable convolutions, pre-activation
//!   residual blocks.
//! - [`model`]: the encoder / decoder / classifier assembly and checkpoints.
//! - [`train`]: reconstruction + cross-entropy objective, Adam, dataset split,
//!   loss-weight grid search.
//! - [`data`]: NIfTI-1 I/O, slicing, normalization, synthetic phantoms and the
//!   slice archive.
//! - [`retrieval`]: descriptor index and confidence-gated Euclidean search.
//! - [`eval`]: Sørensen–Dice scoring of retrieval results.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Every parallel reduction is merged in a fixed order, so results are
//! bit-identical with and without the feature.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod retrieval;
pub mod selfcheck;
pub mod tensor;
pub mod train;
mod wire;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
