//! Augmented contrastive self-supervised pretraining for audio.
//!
//! The pipeline: WAV input (or a synthetic labeled corpus) → mel-spectrogram
//! frontend → stochastic augmentation producing anchor/positive pairs → a
//! small convolutional encoder with a projection head, trained against a
//! bilinear-similarity contrastive loss → downstream transfer via a linear
//! probe or full finetuning → F1/wAP evaluation.
//!
//! Everything is seeded and deterministic in single-threaded mode; the same
//! config and seed reproduce checkpoints and metrics byte for byte.
//!
//! See the `book/` guide for a narrative walkthrough of each stage.

pub mod augment;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod eval;
#[cfg(doctest)]
pub mod guide;
pub mod io;
pub mod model;
pub mod optim;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
