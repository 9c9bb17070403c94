//! Class-incremental learning with an expandable residual backbone, an
//! MLP adapt-layer and a simplex equiangular tight frame (ETF) classifier
//! that grows with the class count.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: tensors, reverse-mode tape, SGD with momentum.
//! - [`geometry`]: construction, expansion and verification of the ETF head.
//! - [`objectives`]: dot-regression, feature distillation and total loss.
//! - [`network`]: base-layer, expand-layers, adapt-layer, heads, checkpoints.
//! - [`data`]: seeded Gaussian blobs and a delimited-file loader.
//! - [`protocol`]: task streams, schedules and the incremental training loop.
//! - [`analysis`]: accuracy metrics, linear CKA, collapse and drift diagnostics.
//! - [`cli`]: config-driven runs, ablation grids and lambda sweeps.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod network;
pub mod objectives;
pub mod protocol;

pub use error::{Error, Result};
