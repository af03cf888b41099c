//! Self-supervised graph representation learning on CPU.
//!
//! This crate holds the algorithmic core and builds without `std` (it only
//! needs `alloc`): CSR graphs and synthetic generators, stochastic view
//! augmentation, a small reverse-mode gradient engine with the graph layers
//! built on it (GCN, mean-pooling with skips, GAT), AdamW with cosine
//! schedules, the bootstrapped latent trainer with its EMA target network, a
//! subsampled InfoNCE baseline, neighborhood-sampled semi-supervised
//! training, and the linear-probe and cost diagnostics.
//!
//! File formats, configuration and the command line live in the `ssgraph`
//! crate.

#![no_std]
#![warn(rust_2018_idioms, unused_qualifications)]

extern crate alloc;

pub mod augment;
pub mod autograd;
pub mod bgrl;
pub mod error;
pub mod eval;
pub mod grace;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampling;
pub mod semisup;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Dataset, Features, Graph, NormKind, NormalizedGraph, SplitMask};
pub use params::ParamSet;
pub use tensor::Matrix;
