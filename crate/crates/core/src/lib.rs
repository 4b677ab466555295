//! Domain-adaptive 2D pose estimation at desk scale.

pub mod adapt_engine;
pub mod discrepancy;
mod error;
pub mod eval_report;
pub mod heatmap_codec;
pub mod model_zoo;
pub mod synthpose_data;

pub use autograd::Tensor;
pub use error::{Error, Result};
