//! Multi-quantile downscaling toolkit.
//!
//! * [`tensor`]: reverse-mode autodiff engine and Adam.
//! * [`model`]: residual super-resolution backbone with deterministic and
//!   quantile heads, stochastic/ensemble inference and postprocessing.
//! * [`loss`]: pinball loss, event weighting, masked objectives.
//! * [`datagen`]: heavy-tailed synthetic downscaling world with exact
//!   conditional quantiles, normalization, augmentation and the on-disk
//!   dataset format.
//! * [`verify`]: contingency scores, divergence, calibration and CRPS proxy.
//! * [`experiment`]: training/evaluation drivers behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod exec;
pub mod experiment;
pub mod loss;
pub mod model;
pub mod seed;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{Graph, NodeId, Tensor};
