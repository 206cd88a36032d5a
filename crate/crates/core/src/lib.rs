//! Action-region tracking head for fine-grained video recognition, built
//! without a video backbone.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! transformer blocks ([`attention`]), the tracking head ([`head`]), the
//! multi-level tracklet contrastive loss ([`mtc`]), the EMA-tuned text
//! semantic bank ([`bank`]), a planted-trajectory benchmark ([`synth`]) and
//! the training loop ([`trainer`]).
//!
//! Loop reference implementations of every loss live in [`oracle`], the
//! finite-difference suite in [`gradcheck`], and [`experiment`] and [`cli`]
//! drive whole runs and the `art` binary.

pub mod attention;
pub mod bank;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod head;
pub mod mtc;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{ArtError, Result, TensorError};
pub use tensor::{Graph, Tensor, Var};
