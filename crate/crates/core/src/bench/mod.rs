//! Synthetic benchmark: scene generation, rendering and metrics.

pub mod metrics;
pub mod scene;

pub use metrics::{evaluate, ApMode, EvalScene, MetricReport, RayDuplicateParams};
pub use scene::{generate_scene, render_images, Scene, SceneConfig, CLASS_NAMES};
