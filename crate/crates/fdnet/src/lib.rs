//! Frequency-domain denoising segmentation network for phase-contrast
//! cell microscopy, with a synthetic phantom dataset, training loop and
//! evaluation tooling.

pub mod ablation;
pub mod attention;
pub mod backbone;
pub mod cif;
pub mod cli;
pub mod data;
pub mod error;
pub mod ftb;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{FdError, Result};
