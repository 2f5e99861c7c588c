//! Cascaded lung CT analysis: volumetric lung segmentation, axial-slice
//! nodule detection and nodule malignancy classification.

pub mod boxes;
pub mod cls;
pub mod dataset;
pub mod det;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seg;
pub mod train;

pub use error::{Error, Result};
