//! Hybrid CNN + shifted-window transformer segmentation for 3D volumes.

pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod cnn;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{GridDims, TokenGrid, WindowBatch, WindowSpec};
pub use model::{Mode, Model, ModelConfig};
pub use tensor::{Scalar, Tensor};
pub use volume::{LabelVolume, Volume};
