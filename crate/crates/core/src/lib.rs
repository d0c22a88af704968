//! Domain-generalization benchmark for 3D segmentation under cross-center
//! and cross-phase shift.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`volume`]: volumes, masks, NIfTI I/O, normalization, patch sampling and
//!   the synthetic phantom generator.
//! - [`split`]: leakage-free source/target split manifests.
//! - [`graphseg`]: 3D Felzenszwalb–Huttenlocher graph segmentation.
//! - [`metrics`]: Dice, Jaccard, precision, recall, HD95 and ASSD.
//! - [`model`]: a small promptable 3D U-Net with explicit backpropagation.
//! - [`ssl`]: EMA teacher–student pretraining with graph regularization.
//! - [`finetune`]: fine-tuning, ERM/MixStyle baselines and domain evaluation.
//! - [`bench`]: sweep orchestration and report emission.

#[cfg(feature = "openblas")]
extern crate blas_src;

pub mod bench;
pub mod config;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod finetune;
pub mod graphseg;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod split;
pub mod ssl;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use exec::ExecMode;
