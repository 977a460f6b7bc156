//! Synthetic multi-camera scenes: generation, JSON files and rendering.

use std::f64::consts::PI;
use std::path::Path;

use crossdtr_tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthmap::{pixel_center, DepthRange};
use crate::error::{Error, Result};
use crate::geometry::{collect_valid_boxes, normalize_angle, Box3D, CameraMatrix};
use crate::network::SceneBounds;

pub const CLASS_CAR: usize = 0;
pub const CLASS_PEDESTRIAN: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["car", "pedestrian"];

/// Mean `(l, w, h)` per class.
pub const SIZE_PRIORS: [[f64; 3]; 2] = [[4.5, 1.9, 1.7], [0.7, 0.7, 1.7]];

const BASE_COLORS: [[f64; 3]; 2] = [[0.95, 0.25, 0.15], [0.15, 0.45, 0.95]];
const NOISE_AMPLITUDE: f64 = 0.05;
const MIN_SEPARATION: f64 = 1.0;
const MAX_TRIES: usize = 1000;
/// Seed offset separating render noise from box sampling.
const RENDER_STREAM: u64 = 0x005e_ed0f_1ae5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_cameras: usize,
    pub image_w: usize,
    pub image_h: usize,
    /// Inclusive `[min, max]` number of boxes.
    pub box_count: [usize; 2],
    pub horizontal_fov_deg: f64,
    /// Range of horizontal distance from the rig, meters.
    pub distance: [f64; 2],
    pub pedestrian_fraction: f64,
    /// Relative size jitter: each extent is scaled by `U(1 - j, 1 + j)`.
    pub size_jitter: f64,
    pub ground_z: f64,
    pub bounds: SceneBounds,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_cameras: 2,
            image_w: 96,
            image_h: 32,
            box_count: [2, 6],
            horizontal_fov_deg: 100.0,
            distance: [4.0, 25.0],
            pedestrian_fraction: 0.5,
            size_jitter: 0.1,
            ground_z: -1.8,
            bounds: SceneBounds::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cameras == 0 || self.num_cameras > 6 {
            return Err(Error::Config(format!(
                "num_cameras must be 1..=6, got {}",
                self.num_cameras
            )));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.box_count[0] > self.box_count[1] {
            return Err(Error::Config(format!(
                "box_count {:?} is not a range",
                self.box_count
            )));
        }
        if !(self.horizontal_fov_deg > 0.0 && self.horizontal_fov_deg < 180.0) {
            return Err(Error::Config(
                "horizontal_fov_deg must be in (0, 180)".into(),
            ));
        }
        if !(self.distance[0] > 0.0 && self.distance[0] <= self.distance[1]) {
            return Err(Error::Config(format!(
                "distance {:?} is not a positive range",
                self.distance
            )));
        }
        if !(0.0..=1.0).contains(&self.pedestrian_fraction)
            || !(0.0..1.0).contains(&self.size_jitter)
        {
            return Err(Error::Config(
                "pedestrian_fraction in [0, 1] and size_jitter in [0, 1) required".into(),
            ));
        }
        self.bounds.validate()
    }

    pub fn focal(&self) -> f64 {
        self.image_w as f64 / 2.0 / (self.horizontal_fov_deg.to_radians() / 2.0).tan()
    }

    /// Ring of cameras at the origin, camera `m` facing yaw `2 pi m / N`.
    pub fn cameras(&self) -> Result<Vec<CameraMatrix>> {
        (0..self.num_cameras)
            .map(|m| {
                let yaw = 2.0 * PI * m as f64 / self.num_cameras as f64;
                CameraMatrix::pinhole(self.focal(), yaw, [0.0; 3], self.image_w, self.image_h)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub cameras: Vec<CameraMatrix>,
    pub boxes: Vec<Box3D>,
    pub seed: u64,
}

impl Scene {
    pub fn image_size(&self) -> (usize, usize) {
        self.cameras
            .first()
            .map_or((0, 0), |c| (c.image_w, c.image_h))
    }

    /// Reflection through the x-z plane: boxes get `y -> -y`, `theta -> -theta`,
    /// and each camera also flips `u -> W - u`, so every image is the mirror
    /// image of the original.
    pub fn mirrored(&self) -> Result<Self> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                let r = c.row_major();
                let w = c.image_w as f64;
                let mut m = [[0.0; 4]; 3];
                for col in 0..4 {
                    let sign = if col == 1 { -1.0 } else { 1.0 };
                    m[0][col] = sign * (w * r[8 + col] - r[col]);
                    m[1][col] = sign * r[4 + col];
                    m[2][col] = sign * r[8 + col];
                }
                CameraMatrix::new(m, c.image_w, c.image_h)
            })
            .collect::<Result<Vec<_>>>()?;
        let boxes = self
            .boxes
            .iter()
            .map(|b| Box3D {
                y: -b.y,
                theta: normalize_angle(-b.theta),
                ..*b
            })
            .collect();
        Ok(Self {
            scene_id: format!("{}_mirror", self.scene_id),
            cameras,
            boxes,
            seed: self.seed,
        })
    }

    pub fn to_file(&self) -> SceneFile {
        let (image_w, image_h) = self.image_size();
        SceneFile {
            scene_id: self.scene_id.clone(),
            image_w,
            image_h,
            cameras: self
                .cameras
                .iter()
                .map(|c| c.row_major().to_vec())
                .collect(),
            boxes: self.boxes.clone(),
            seed: self.seed,
        }
    }

    pub fn from_file(f: SceneFile) -> Result<Self> {
        let cameras = f
            .cameras
            .iter()
            .map(|v| CameraMatrix::from_row_major(v, f.image_w, f.image_h))
            .collect::<Result<Vec<_>>>()?;
        for b in &f.boxes {
            b.validate()?;
        }
        Ok(Self {
            scene_id: f.scene_id,
            cameras,
            boxes: f.boxes,
            seed: f.seed,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_file(file)
    }
}

/// On-disk scene layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene_id: String,
    pub image_w: usize,
    pub image_h: usize,
    pub cameras: Vec<Vec<f64>>,
    pub boxes: Vec<Box3D>,
    pub seed: u64,
}

pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:06}")
}

/// Samples a scene: each box is placed in the view cone of a random camera
/// (inside 80% of its horizontal field of view), resting on the ground.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = cfg.cameras()?;
    let count = rng.gen_range(cfg.box_count[0]..=cfg.box_count[1]);
    let half_fov = 0.8 * cfg.horizontal_fov_deg.to_radians() / 2.0;
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    let mut tries = 0;
    while boxes.len() < count {
        if tries == MAX_TRIES {
            return Err(Error::Generation(format!(
                "placed {} of {count} boxes after {MAX_TRIES} tries (seed {seed})",
                boxes.len()
            )));
        }
        tries += 1;
        let cam = rng.gen_range(0..cfg.num_cameras);
        let yaw_cam = 2.0 * PI * cam as f64 / cfg.num_cameras as f64;
        let azimuth = yaw_cam + rng.gen_range(-half_fov..=half_fov);
        let r = rng.gen_range(cfg.distance[0]..=cfg.distance[1]);
        let class_id = if rng.gen_bool(cfg.pedestrian_fraction) {
            CLASS_PEDESTRIAN
        } else {
            CLASS_CAR
        };
        let j = cfg.size_jitter;
        let size = SIZE_PRIORS[class_id].map(|s| s * rng.gen_range(1.0 - j..=1.0 + j));
        let theta = rng.gen_range(-PI..PI);
        let center = [
            r * azimuth.cos(),
            r * azimuth.sin(),
            cfg.ground_z + size[2] / 2.0,
        ];
        let candidate = Box3D::new(center, size, theta, class_id)?;
        let clear = boxes.iter().all(|b| {
            let d = [b.x - center[0], b.y - center[1], b.z - center[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() >= MIN_SEPARATION
        });
        if clear && cfg.bounds.contains(center) {
            boxes.push(candidate);
        }
    }
    Ok(Scene {
        scene_id: scene_id(seed),
        cameras,
        boxes,
        seed,
    })
}

/// Renders `[N, 3, H, W]`: each valid box fills its clamped 2D rectangle
/// with its class color dimmed by `1 / (1 + d_c / 10)`, nearest box on top,
/// plus uniform noise in `[-0.05, 0.05]`, clamped to `[0, 1]`.
pub fn render_images(scene: &Scene, range: &DepthRange) -> Tensor {
    let (w, h) = scene.image_size();
    let n = scene.cameras.len();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ RENDER_STREAM);
    let mut data = vec![0.0; n * 3 * h * w];
    for (m, cam) in scene.cameras.iter().enumerate() {
        let valid = collect_valid_boxes(&scene.boxes, cam, range);
        for i in 0..h {
            for j in 0..w {
                let (u, v) = pixel_center(i, j, w, h, w, h);
                let nearest = valid
                    .iter()
                    .filter(|b| b.rect.contains(u, v))
                    .min_by(|a, b| a.rect.depth.total_cmp(&b.rect.depth));
                let color = nearest.map_or([0.0; 3], |b| {
                    let dim = 1.0 / (1.0 + b.rect.depth / 10.0);
                    let class = scene.boxes[b.source].class_id.min(BASE_COLORS.len() - 1);
                    BASE_COLORS[class].map(|c| c * dim)
                });
                for (ch, c) in color.iter().enumerate() {
                    let noise = rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                    data[((m * 3 + ch) * h + i) * w + j] = (c + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(vec![n, 3, h, w], data).expect("render shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirrored_scene_projects_to_flipped_pixels() {
        use crate::geometry::project_point;
        let scene = generate_scene(4, &SceneConfig::default()).unwrap();
        let m = scene.mirrored().unwrap();
        for (a, b) in scene.boxes.iter().zip(&m.boxes) {
            let p = [a.x, a.y, a.z];
            let q = [b.x, b.y, b.z];
            assert_eq!(b.y, -a.y);
            for (ca, cb) in scene.cameras.iter().zip(&m.cameras) {
                let (pa, pb) = (project_point(ca, p).unwrap(), project_point(cb, q).unwrap());
                assert!((pb.u - (ca.image_w as f64 - pa.u)).abs() < 1e-9);
                assert!((pb.v - pa.v).abs() < 1e-9 && (pb.d - pa.d).abs() < 1e-9);
            }
        }
        let range = DepthRange::default();
        let (w, h) = scene.image_size();
        let maps = crate::depthmap::build_sparse_depth_maps(
            &scene.boxes,
            &scene.cameras,
            &range,
            w,
            h,
            false,
        )
        .unwrap();
        let flipped =
            crate::depthmap::build_sparse_depth_maps(&m.boxes, &m.cameras, &range, w, h, false)
                .unwrap();
        let mut differ = 0;
        for (a, b) in maps.iter().zip(&flipped) {
            for i in 0..h {
                for j in 0..w {
                    differ += usize::from(a.bin_at(i, j) != b.bin_at(i, w - 1 - j));
                }
            }
        }
        // rounding can move a handful of edge pixels
        assert!(
            differ * 1000 <= maps.len() * w * h,
            "{differ} pixels differ"
        );
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(
            generate_scene(7, &cfg).unwrap(),
            generate_scene(7, &cfg).unwrap()
        );
        assert_ne!(
            generate_scene(7, &cfg).unwrap().boxes,
            generate_scene(8, &cfg).unwrap().boxes
        );
    }

    #[test]
    fn fixed_box_count() {
        let cfg = SceneConfig {
            box_count: [3, 3],
            ..SceneConfig::default()
        };
        assert_eq!(generate_scene(1, &cfg).unwrap().boxes.len(), 3);
    }

    #[test]
    fn impossible_packing_fails() {
        let cfg = SceneConfig {
            box_count: [50, 50],
            distance: [5.0, 5.0],
            horizontal_fov_deg: 1.0,
            num_cameras: 1,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(1, &cfg), Err(Error::Generation(_))));
    }

    #[test]
    fn json_round_trip() {
        let scene = generate_scene(3, &SceneConfig::default()).unwrap();
        let file: SceneFile = serde_json::from_str(&scene.to_json()).unwrap();
        assert_eq!(Scene::from_file(file).unwrap(), scene);
    }

    #[test]
    fn empty_scene_renders_noise_only() {
        let cfg = SceneConfig {
            box_count: [0, 0],
            ..SceneConfig::default()
        };
        let scene = generate_scene(4, &cfg).unwrap();
        let img = render_images(&scene, &DepthRange::default());
        assert_eq!(img.shape(), &[2, 3, 32, 96]);
        assert!(img
            .data()
            .iter()
            .all(|&v| (0.0..=NOISE_AMPLITUDE).contains(&v)));
    }
}
