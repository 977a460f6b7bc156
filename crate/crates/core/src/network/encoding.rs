//! Fixed encodings: box regression space, sinusoidal codes, anchor grid and
//! the ray samples behind the 3D positional embedding.

use crossdtr_tensor::{sigmoid, Tensor};

use crate::depthmap::{pixel_center, DepthRange};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D, CameraMatrix};
use crate::network::config::SceneBounds;

/// Width of the regression vector: normalized center, log sizes, sin/cos yaw.
pub const REG_DIM: usize = 8;

/// Frequencies per anchor coordinate in the query positional code.
pub const ANCHOR_FREQS: usize = 8;

/// Regression-space encoding of a box: `[cx, cy, cz, ln l, ln w, ln h, sin θ, cos θ]`
/// with the center normalized by `bounds`.
pub fn encode_box(b: &Box3D, bounds: &SceneBounds) -> [f64; REG_DIM] {
    let n = bounds.normalize(b.center());
    [
        n[0],
        n[1],
        n[2],
        b.l.ln(),
        b.w.ln(),
        b.h.ln(),
        b.theta.sin(),
        b.theta.cos(),
    ]
}

/// Inverse of [`encode_box`]. `atan2(0, 0)` decodes to yaw 0.
pub fn decode_encoded(enc: &[f64], bounds: &SceneBounds, class_id: usize) -> Box3D {
    let c = bounds.denormalize([enc[0], enc[1], enc[2]]);
    Box3D {
        x: c[0],
        y: c[1],
        z: c[2],
        l: enc[3].exp(),
        w: enc[4].exp(),
        h: enc[5].exp(),
        theta: normalize_angle(enc[6].atan2(enc[7])),
        class_id,
    }
}

/// Decodes raw head outputs relative to an anchor given as a logit.
pub fn decode_raw(
    raw: &[f64],
    anchor_logit: [f64; 3],
    bounds: &SceneBounds,
    class_id: usize,
) -> Box3D {
    let mut enc = [0.0; REG_DIM];
    enc.copy_from_slice(&raw[..REG_DIM]);
    for a in 0..3 {
        enc[a] = sigmoid(raw[a] + anchor_logit[a]);
    }
    decode_encoded(&enc, bounds, class_id)
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Halton points (bases 2, 3, 5) in the open unit cube, skipping the origin.
pub fn halton_anchors(n: usize) -> Vec<[f64; 3]> {
    (1..=n)
        .map(|i| {
            [
                radical_inverse(i, 2),
                radical_inverse(i, 3),
                radical_inverse(i, 5),
            ]
        })
        .collect()
}

/// Angular frequencies `π · 2^f` of the anchor code.
pub fn anchor_freqs() -> Vec<f64> {
    (0..ANCHOR_FREQS)
        .map(|f| std::f64::consts::PI * (1u64 << f) as f64)
        .collect()
}

/// Sinusoidal code of anchors `[Q, 3]` in the unit cube -> `[Q, 3 * 2 * ANCHOR_FREQS]`;
/// per coordinate, all sines then all cosines.
pub fn anchor_code(anchors: &[f64]) -> Tensor {
    let q = anchors.len() / 3;
    let width = 3 * 2 * ANCHOR_FREQS;
    let mut data = Vec::with_capacity(q * width);
    for a in anchors.chunks_exact(3) {
        for &x in a {
            let angles: Vec<f64> = anchor_freqs().iter().map(|w| w * x).collect();
            data.extend(angles.iter().map(|t| t.sin()));
            data.extend(angles.iter().map(|t| t.cos()));
        }
    }
    Tensor::new(vec![q, width], data).expect("anchor code shape")
}

/// Fixed 2D sinusoidal code `[h_d * w_d, dim]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn position_code_2d(h_d: usize, w_d: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(h_d * w_d * dim);
    for i in 0..h_d {
        for j in 0..w_d {
            for c in 0..dim {
                let (pos, k, width) = if c < half {
                    ((i as f64 + 0.5) / h_d as f64, c, half)
                } else {
                    ((j as f64 + 0.5) / w_d as f64, c - half, dim - half)
                };
                let freq = 10000f64.powf(-((k / 2 * 2) as f64) / width.max(1) as f64);
                let angle = 2.0 * std::f64::consts::PI * pos * freq * 4.0;
                data.push(if k % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new(vec![h_d * w_d, dim], data).expect("position code shape")
}

/// Back-projected LID-midpoint samples along each feature pixel's ray,
/// normalized by `bounds`: `[N * h_d * w_d, 3 * K]`, cameras outermost.
pub fn ray_samples(
    cameras: &[CameraMatrix],
    w_d: usize,
    h_d: usize,
    range: &DepthRange,
    bounds: &SceneBounds,
) -> Result<Tensor> {
    let k = range.num_bins;
    let depths: Vec<f64> = (1..=k).map(|b| range.lid_depth(b)).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(cameras.len() * w_d * h_d * 3 * k);
    for cam in cameras {
        if cam.center().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("camera matrix is not invertible".into()));
        }
        for i in 0..h_d {
            for j in 0..w_d {
                let (u, v) = pixel_center(i, j, w_d, h_d, cam.image_w, cam.image_h);
                for &d in &depths {
                    data.extend(bounds.normalize(cam.back_project(u, v, d)));
                }
            }
        }
    }
    Ok(Tensor::new(vec![cameras.len() * w_d * h_d, 3 * k], data)?)
}
