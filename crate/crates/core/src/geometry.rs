//! Box parameterisation, pinhole projection and 2D box extraction.
//!
//! Frames: the LiDAR/ego frame has x forward, y left, z up. Camera frames
//! have x right, y down, z along the optical axis. A [`CameraMatrix`] maps
//! homogeneous LiDAR points to `d · [u v 1]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::depthmap::DepthRange;
use crate::error::{Error, Result};

/// Corners with depth at or below this are treated as behind the camera.
pub const BEHIND_EPS: f64 = 1e-6;
/// Projections with |d| below this are degenerate.
pub const DEGENERATE_EPS: f64 = 1e-9;

pub type Point3 = [f64; 3];

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// 7-DoF box: center, extents and yaw about +z, plus a class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], theta: f64, class_id: usize) -> Result<Self> {
        let b = Self {
            x: center[0],
            y: center[1],
            z: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            theta: normalize_angle(theta),
            class_id,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox("non-finite field".into()));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got l={} w={} h={}",
                self.l, self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point3 {
        [self.x, self.y, self.z]
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }
}

/// Canonical corners: sign patterns of (±l/2, ±w/2, ±h/2) in lexicographic
/// order (`-` before `+`, x slowest), rotated by yaw then translated.
pub fn box_corners(b: &Box3D) -> [Point3; 8] {
    let (s, c) = b.theta.sin_cos();
    let mut out = [[0.0; 3]; 8];
    let mut k = 0;
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let (px, py, pz) = (sx * b.l / 2.0, sy * b.w / 2.0, sz * b.h / 2.0);
                out[k] = [b.x + c * px - s * py, b.y + s * px + c * py, b.z + pz];
                k += 1;
            }
        }
    }
    out
}

/// 3x4 projective camera matrix with its image size in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraMatrix {
    t: [[f64; 4]; 3],
    pub image_w: usize,
    pub image_h: usize,
}

impl CameraMatrix {
    pub fn new(t: [[f64; 4]; 3], image_w: usize, image_h: usize) -> Result<Self> {
        if t.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite entry".into()));
        }
        let cam = Self {
            t,
            image_w,
            image_h,
        };
        let det = det3(&cam.rotation_block());
        if det.abs() < 1e-12 {
            return Err(Error::InvalidCamera(format!(
                "3x3 block is singular (det {det:e})"
            )));
        }
        Ok(cam)
    }

    pub fn from_row_major(values: &[f64], image_w: usize, image_h: usize) -> Result<Self> {
        if values.len() != 12 {
            return Err(Error::InvalidCamera(format!(
                "expected 12 values, got {}",
                values.len()
            )));
        }
        let mut t = [[0.0; 4]; 3];
        for r in 0..3 {
            t[r].copy_from_slice(&values[r * 4..r * 4 + 4]);
        }
        Self::new(t, image_w, image_h)
    }

    /// Pinhole camera at `position` looking along yaw `yaw` in the ground
    /// plane, with focal length `focal` pixels and principal point at the
    /// image center.
    pub fn pinhole(
        focal: f64,
        yaw: f64,
        position: Point3,
        image_w: usize,
        image_h: usize,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        let rot = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let k = [
            [focal, 0.0, image_w as f64 / 2.0],
            [0.0, focal, image_h as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        let trans: Vec<f64> = (0..3)
            .map(|r| -(0..3).map(|j| rot[r][j] * position[j]).sum::<f64>())
            .collect();
        let mut t = [[0.0; 4]; 3];
        for r in 0..3 {
            for col in 0..3 {
                t[r][col] = (0..3).map(|j| k[r][j] * rot[j][col]).sum();
            }
            t[r][3] = (0..3).map(|j| k[r][j] * trans[j]).sum();
        }
        Self::new(t, image_w, image_h)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 3] {
        &self.t
    }

    pub fn row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 4..r * 4 + 4].copy_from_slice(&self.t[r]);
        }
        out
    }

    fn rotation_block(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            m[r].copy_from_slice(&self.t[r][..3]);
        }
        m
    }

    /// Optical center in the LiDAR frame.
    pub fn center(&self) -> Point3 {
        let inv = inv3(&self.rotation_block());
        let t = [self.t[0][3], self.t[1][3], self.t[2][3]];
        let mut c = [0.0; 3];
        for r in 0..3 {
            c[r] = -(0..3).map(|j| inv[r][j] * t[j]).sum::<f64>();
        }
        c
    }

    /// LiDAR point whose projection is `(u, v)` at depth `d`.
    pub fn back_project(&self, u: f64, v: f64, d: f64) -> Point3 {
        let inv = inv3(&self.rotation_block());
        let rhs = [d * u - self.t[0][3], d * v - self.t[1][3], d - self.t[2][3]];
        let mut p = [0.0; 3];
        for r in 0..3 {
            p[r] = (0..3).map(|j| inv[r][j] * rhs[j]).sum();
        }
        p
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(m);
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            // cofactor of (c, r) -> adjugate
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            out[r][c] = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / d;
        }
    }
    out
}

/// Image coordinates and homogeneous depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl ProjectedPoint {
    pub fn is_behind(&self) -> bool {
        self.d <= BEHIND_EPS
    }
}

pub fn project_point(cam: &CameraMatrix, p: Point3) -> Result<ProjectedPoint> {
    let row = |r: usize| cam.t[r][0] * p[0] + cam.t[r][1] * p[1] + cam.t[r][2] * p[2] + cam.t[r][3];
    let d = row(2);
    if d.abs() < DEGENERATE_EPS {
        return Err(Error::DegenerateProjection(d));
    }
    Ok(ProjectedPoint {
        u: row(0) / d,
        v: row(1) / d,
        d,
    })
}

/// A projected corner; `point` is absent when the projection was degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedCorner {
    pub point: Option<ProjectedPoint>,
    pub behind_camera: bool,
}

impl ProjectedCorner {
    fn from_result(r: Result<ProjectedPoint>) -> Self {
        match r {
            Ok(p) => Self {
                point: Some(p),
                behind_camera: p.is_behind(),
            },
            Err(_) => Self {
                point: None,
                behind_camera: true,
            },
        }
    }

    pub fn visible(&self) -> Option<ProjectedPoint> {
        if self.behind_camera {
            None
        } else {
            self.point
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBox {
    pub center: ProjectedCorner,
    pub corners: [ProjectedCorner; 8],
}

pub fn project_box(cam: &CameraMatrix, b: &Box3D) -> ProjectedBox {
    let center = ProjectedCorner::from_result(project_point(cam, b.center()));
    let corners = box_corners(b).map(|p| ProjectedCorner::from_result(project_point(cam, p)));
    ProjectedBox { center, corners }
}

/// Image-space rectangle of a projected box, tagged with its center depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub depth: f64,
}

impl Box2D {
    /// Closed on the min edges, open on the max edges.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min && u < self.u_max && v >= self.v_min && v < self.v_max
    }
}

/// Min/max of the in-front corners, clamped to the image. Absent when no
/// corner is in front or the clamped rectangle has zero area.
pub fn extract_box2d(
    corners: &[ProjectedCorner],
    image_w: usize,
    image_h: usize,
    depth: f64,
) -> Option<Box2D> {
    let mut visible = corners.iter().filter_map(|c| c.visible()).peekable();
    visible.peek()?;
    let (mut u0, mut u1, mut v0, mut v1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in visible {
        u0 = u0.min(p.u);
        u1 = u1.max(p.u);
        v0 = v0.min(p.v);
        v1 = v1.max(p.v);
    }
    let (w, h) = (image_w as f64, image_h as f64);
    let b = Box2D {
        u_min: u0.clamp(0.0, w),
        u_max: u1.clamp(0.0, w),
        v_min: v0.clamp(0.0, h),
        v_max: v1.clamp(0.0, h),
        depth,
    };
    (b.u_max > b.u_min && b.v_max > b.v_min).then_some(b)
}

/// A box kept for camera rasterisation, with its index in the input list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidBox {
    pub source: usize,
    pub rect: Box2D,
}

/// Keeps boxes whose center depth lies in the range and whose 2D box is
/// non-empty, in input order.
pub fn collect_valid_boxes(
    boxes: &[Box3D],
    cam: &CameraMatrix,
    range: &DepthRange,
) -> Vec<ValidBox> {
    boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            let pb = project_box(cam, b);
            let dc = pb.center.point?.d;
            if dc < range.d_min || dc > range.d_max {
                return None;
            }
            let rect = extract_box2d(&pb.corners, cam.image_w, cam.image_h, dc)?;
            Some(ValidBox { source: i, rect })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam() -> CameraMatrix {
        CameraMatrix::new(
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            100,
            100,
        )
        .unwrap()
    }

    #[test]
    fn angle_wrap() {
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((normalize_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn box_rejects_bad_extent() {
        assert!(Box3D::new([0.0; 3], [1.0, 0.0, 1.0], 0.0, 0).is_err());
        assert!(Box3D::new([0.0; 3], [1.0, 1.0, -1.0], 0.0, 0).is_err());
    }

    #[test]
    fn identity_projection() {
        let cam = identity_cam();
        let p = project_point(&cam, [0.0, 0.0, 5.0]).unwrap();
        assert_eq!((p.u, p.v, p.d), (0.0, 0.0, 5.0));
        let p = project_point(&cam, [2.0, 1.0, 4.0]).unwrap();
        assert_eq!((p.u, p.v, p.d), (0.5, 0.25, 4.0));
        assert!(matches!(
            project_point(&cam, [1.0, 1.0, 0.0]),
            Err(Error::DegenerateProjection(_))
        ));
    }

    #[test]
    fn singular_camera_rejected() {
        let t = [
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        assert!(matches!(
            CameraMatrix::new(t, 10, 10),
            Err(Error::InvalidCamera(_))
        ));
    }

    #[test]
    fn pinhole_center_and_back_projection() {
        let cam = CameraMatrix::pinhole(40.0, 0.7, [0.5, -1.0, 0.3], 96, 32).unwrap();
        let c = cam.center();
        for (a, b) in c.iter().zip([0.5, -1.0, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = cam.back_project(10.0, 20.0, 7.5);
        let q = project_point(&cam, p).unwrap();
        assert!((q.u - 10.0).abs() < 1e-9 && (q.v - 20.0).abs() < 1e-9 && (q.d - 7.5).abs() < 1e-9);
        // forward axis maps to the principal point
        let (s, co) = 0.7f64.sin_cos();
        let ahead = project_point(&cam, [0.5 + 10.0 * co, -1.0 + 10.0 * s, 0.3]).unwrap();
        assert!((ahead.u - 48.0).abs() < 1e-9 && (ahead.v - 16.0).abs() < 1e-9);
        assert!((ahead.d - 10.0).abs() < 1e-9);
    }

    #[test]
    fn axis_aligned_cube_corners() {
        let b = Box3D::new([0.0; 3], [2.0, 2.0, 2.0], 0.0, 0).unwrap();
        let cs = box_corners(&b);
        assert_eq!(cs[0], [-1.0, -1.0, -1.0]);
        assert_eq!(cs[1], [-1.0, -1.0, 1.0]);
        assert_eq!(cs[2], [-1.0, 1.0, -1.0]);
        assert_eq!(cs[7], [1.0, 1.0, 1.0]);
        for c in cs {
            assert!(c.iter().all(|v| v.abs() == 1.0));
        }
    }

    #[test]
    fn quarter_turn_swaps_footprint() {
        let b = Box3D::new([0.0; 3], [4.0, 2.0, 2.0], PI / 2.0, 0).unwrap();
        for c in box_corners(&b) {
            assert!((c[0].abs() - 1.0).abs() < 1e-12, "{c:?}");
            assert!((c[1].abs() - 2.0).abs() < 1e-12, "{c:?}");
        }
    }

    #[test]
    fn box_center_projection_and_behind_flag() {
        let cam = identity_cam();
        let b = Box3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let pb = project_box(&cam, &b);
        let c = pb.center.point.unwrap();
        assert_eq!((c.u, c.v, c.d), (0.0, 0.0, 10.0));
        assert!(!pb.center.behind_camera);
        let behind = Box3D::new([0.0, 0.0, -5.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        assert!(project_box(&cam, &behind).center.behind_camera);
    }

    #[test]
    fn extract_degenerate_and_clamped() {
        let p = ProjectedCorner {
            point: Some(ProjectedPoint {
                u: 5.0,
                v: 5.0,
                d: 3.0,
            }),
            behind_camera: false,
        };
        assert!(extract_box2d(&[p; 8], 10, 10, 3.0).is_none());
        let q = ProjectedCorner {
            point: Some(ProjectedPoint {
                u: -4.0,
                v: 8.0,
                d: 3.0,
            }),
            behind_camera: false,
        };
        let b = extract_box2d(&[p, q], 10, 10, 3.0).unwrap();
        assert_eq!((b.u_min, b.u_max, b.v_min, b.v_max), (0.0, 5.0, 5.0, 8.0));
        let hidden = ProjectedCorner {
            point: Some(ProjectedPoint {
                u: 1.0,
                v: 1.0,
                d: -1.0,
            }),
            behind_camera: true,
        };
        assert!(extract_box2d(&[hidden; 8], 10, 10, 3.0).is_none());
    }

    #[test]
    fn collect_respects_depth_range() {
        let cam = CameraMatrix::pinhole(40.0, 0.0, [0.0; 3], 96, 32).unwrap();
        let range = DepthRange::new(1.0, 20.0, 8).unwrap();
        assert!(collect_valid_boxes(&[], &cam, &range).is_empty());
        let near = Box3D::new([10.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let far = Box3D::new([21.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let kept = collect_valid_boxes(&[far, near], &cam, &range);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source, 1);
        assert!((kept[0].rect.depth - 10.0).abs() < 1e-12);
    }
}
