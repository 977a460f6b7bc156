use serde::{Deserialize, Serialize};

use crate::depthmap::DepthRange;
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Axis-aligned region (meters, LiDAR frame) that decoded centers live in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBounds {
    pub min: Point3,
    pub max: Point3,
}

impl Default for SceneBounds {
    fn default() -> Self {
        Self {
            min: [-30.0, -30.0, -3.0],
            max: [30.0, 30.0, 1.0],
        }
    }
}

impl SceneBounds {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
                return Err(Error::Config(format!(
                    "scene bounds axis {a}: need min < max, got [{}, {}]",
                    self.min[a], self.max[a]
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn normalize(&self, p: Point3) -> Point3 {
        [0, 1, 2].map(|a| (p[a] - self.min[a]) / self.extent(a))
    }

    pub fn denormalize(&self, n: Point3) -> Point3 {
        [0, 1, 2].map(|a| self.min[a] + n[a] * self.extent(a))
    }

    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub depth_range: DepthRange,
    pub feature_stride: usize,
    /// Hidden width of every head and feed-forward MLP.
    pub hidden_dim: usize,
    pub scene_bounds: SceneBounds,
    pub query_self_attention: bool,
    /// Cross-depth sub-layer in every decoder layer.
    pub cross_depth: bool,
    /// One query positional MLP for both cross attentions; separate ones otherwise.
    pub share_query_pos: bool,
    pub freeze_anchors: bool,
    /// Supervise every decoder layer, not only the last.
    pub deep_supervision: bool,
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            encoder_layers: 1,
            decoder_layers: 3,
            heads: 4,
            num_queries: 64,
            num_classes: 2,
            depth_range: DepthRange::default(),
            feature_stride: 16,
            hidden_dim: 64,
            scene_bounds: SceneBounds::default(),
            query_self_attention: true,
            cross_depth: true,
            share_query_pos: true,
            freeze_anchors: false,
            deep_supervision: true,
            image_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("num_queries", self.num_queries),
            ("num_classes", self.num_classes),
            ("hidden_dim", self.hidden_dim),
            ("image_channels", self.image_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !self.feature_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "feature_stride must be a power of two, got {}",
                self.feature_stride
            )));
        }
        self.depth_range.validate()?;
        self.scene_bounds.validate()
    }

    /// Output channels of each stride-2 stem stage.
    pub fn stem_channels(&self) -> Vec<usize> {
        let stages = self.feature_stride.trailing_zeros() as usize;
        (0..stages)
            .map(|s| {
                (self.embed_dim >> (stages - 1 - s))
                    .max(8)
                    .min(self.embed_dim)
            })
            .collect()
    }

    /// Feature-map size for an input image, checking divisibility.
    pub fn feature_size(&self, image_w: usize, image_h: usize) -> Result<(usize, usize)> {
        let s = self.feature_stride;
        if !image_w.is_multiple_of(s) || !image_h.is_multiple_of(s) || image_w == 0 || image_h == 0
        {
            return Err(Error::Config(format!(
                "image {image_w}x{image_h} not divisible by feature stride {s}"
            )));
        }
        Ok((image_w / s, image_h / s))
    }
}
