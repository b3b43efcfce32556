//! Joint object detection, per-object depth estimation and quarter-resolution
//! semantic segmentation from one shared residual encoder.

pub mod augment;
pub mod config;
pub mod dataio;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod ndgrad;
pub mod nn;
pub mod seghead;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
