//! Core of a continual image-captioning framework.
//!
//! Everything here is allocation-only (`no_std` + `alloc`): domain types,
//! tokenizers, task-stream construction, the salient-token prompt engine,
//! a small reverse-mode autograd engine with a reference vision/text
//! transformer, the four training objectives, the task-sequential trainer,
//! autoregressive generation, caption metrics and forgetting analysis.
//!
//! File formats, image decoding and the command line live in the `lgcap`
//! companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod error;
pub mod forgetting;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod split;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{cosine_similarity, normalize, EmbeddingVec, Image, LossBreakdown, Sample, TaskSplit, TaskStream, TokenSeq};
