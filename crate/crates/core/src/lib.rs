//! Depth-prior guided skip refinement for binary segmentation.
//!
//! The crate provides CBAM-style attention units, the GPM stage and its
//! four-level chain, a reference U-Net, depth-map I/O with depth metrics,
//! segmentation metrics, a training harness and parameter/FLOP accounting.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod complexity;
pub mod config;
pub mod dataset;
pub mod depth_io;
pub mod error;
pub mod experiment;
pub mod gpm;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{GpmError, Result};
pub use gpmseg_tensor as tensor;
