//! Desk-scale differentiable architecture search for speech emotion
//! recognition: CNN cell search on spectrograms, recurrent-cell selection on
//! sequence features, attention pooling over frames, and decision-level
//! fusion of the two branches, all on top of a from-scratch reverse-mode
//! autodiff tape. Verified by gradient checks and brute-force search-space
//! oracles rather than full-corpus benchmarks.

// index-based loops are deliberate in the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod batch;
pub mod cli;
pub mod config;
pub mod darts;
pub mod dataset;
pub mod dot;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod rnn;
pub mod seed;
pub mod space;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

// re-exported so downstream crates seed the same RNGs
pub use rand;
pub use rand_chacha;
