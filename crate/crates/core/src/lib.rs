//! Depth-guided multi-camera 3D detection at desk scale.

pub mod bench;
pub mod depthmap;
pub mod error;
pub mod geometry;
pub mod network;
pub mod objective;
pub mod oracle;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
