//! The learnable detector: convolution stem, depth predictor with encoder,
//! 3D positional embedding, anchor queries, multi-attention decoder and heads.

pub mod config;
pub mod encoding;
pub mod layers;
pub mod model;

pub use config::{ModelConfig, SceneBounds};
pub use model::{
    CrossDtr, DepthOutputs, Detection, DetectionSet, HeadOutput, ModelOutput, SceneInput,
};
