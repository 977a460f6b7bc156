//! Object-wise sparse depth maps: nearest-object rasterisation of projected
//! boxes at feature resolution, then linear-increasing discretisation (LID).
//!
//! Bin 0 is background; objects occupy bins `1..=K`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{collect_valid_boxes, Box2D, Box3D, CameraMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
    pub num_bins: usize,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 61.2,
            num_bins: 16,
        }
    }
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64, num_bins: usize) -> Result<Self> {
        let r = Self {
            d_min,
            d_max,
            num_bins,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_max.is_finite())
            || self.d_min < 0.0
            || self.d_min >= self.d_max
        {
            return Err(Error::Config(format!(
                "depth range needs 0 <= d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.num_bins < 2 {
            return Err(Error::Config(format!(
                "need at least 2 depth bins, got {}",
                self.num_bins
            )));
        }
        Ok(())
    }

    /// Width of the first bin; bin `i` is `i` times as wide.
    pub fn delta(&self) -> f64 {
        let k = self.num_bins as f64;
        2.0 * (self.d_max - self.d_min) / (k * (k + 1.0))
    }

    /// Boundary `edge_i = d_min + delta * i (i + 1) / 2` for `i in 0..=K`.
    pub fn edge(&self, i: usize) -> f64 {
        let i = i as f64;
        self.d_min + self.delta() * i * (i + 1.0) / 2.0
    }

    /// LID bin in `1..=K` of a metric depth.
    pub fn lid_bin(&self, d: f64) -> Result<usize> {
        if !(d >= self.d_min && d <= self.d_max) {
            return Err(Error::DepthOutOfRange {
                depth: d,
                d_min: self.d_min,
                d_max: self.d_max,
            });
        }
        let t = -0.5 + 0.5 * (1.0 + 8.0 * (d - self.d_min) / self.delta()).sqrt();
        Ok((1 + t.floor() as usize).clamp(1, self.num_bins))
    }

    /// Midpoint of bin `bin` (`1..=K`).
    pub fn lid_depth(&self, bin: usize) -> Result<f64> {
        if bin == 0 || bin > self.num_bins {
            return Err(Error::Usage(format!(
                "depth bin {bin} is not an object bin (valid 1..={})",
                self.num_bins
            )));
        }
        Ok(0.5 * (self.edge(bin - 1) + self.edge(bin)))
    }
}

/// Per-camera grid of bin indices, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    pub width: usize,
    pub height: usize,
    pub bins: Vec<u16>,
    /// Metric depths before discretisation (0 = background), when kept.
    pub raw: Option<Vec<f64>>,
}

impl SparseDepthMap {
    pub fn bin_at(&self, row: usize, col: usize) -> u16 {
        self.bins[row * self.width + col]
    }

    pub fn nonzero(&self) -> usize {
        self.bins.iter().filter(|&&b| b != 0).count()
    }
}

/// Image-space center of feature pixel (`row`, `col`).
#[inline]
pub fn pixel_center(
    row: usize,
    col: usize,
    w_d: usize,
    h_d: usize,
    image_w: usize,
    image_h: usize,
) -> (f64, f64) {
    (
        (col as f64 + 0.5) * image_w as f64 / w_d as f64,
        (row as f64 + 0.5) * image_h as f64 / h_d as f64,
    )
}

/// First index whose pixel center is `>= bound` along one axis.
fn first_at_or_after(bound: f64, n: usize, center: impl Fn(usize) -> f64) -> usize {
    let mut lo = 0;
    let mut hi = n;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if center(mid) >= bound {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Raw metric depth grid (`h_d x w_d`, zeros for background): each covered
/// pixel takes the smallest center depth among covering boxes.
pub fn rasterize(
    valid: &[Box2D],
    w_d: usize,
    h_d: usize,
    image_w: usize,
    image_h: usize,
) -> Vec<f64> {
    let mut grid = vec![0.0; w_d * h_d];
    let cu = |j: usize| pixel_center(0, j, w_d, h_d, image_w, image_h).0;
    let cv = |i: usize| pixel_center(i, 0, w_d, h_d, image_w, image_h).1;
    for b in valid {
        let j0 = first_at_or_after(b.u_min, w_d, cu);
        let j1 = first_at_or_after(b.u_max, w_d, cu);
        let i0 = first_at_or_after(b.v_min, h_d, cv);
        let i1 = first_at_or_after(b.v_max, h_d, cv);
        for i in i0..i1 {
            for j in j0..j1 {
                let cell = &mut grid[i * w_d + j];
                if *cell == 0.0 || b.depth < *cell {
                    *cell = b.depth;
                }
            }
        }
    }
    grid
}

/// Discretises a raw grid; zeros stay background.
pub fn discretize(raw: &[f64], range: &DepthRange) -> Result<Vec<u16>> {
    raw.iter()
        .map(|&d| {
            if d == 0.0 {
                Ok(0)
            } else {
                range.lid_bin(d).map(|b| b as u16)
            }
        })
        .collect()
}

/// One sparse depth map per camera.
pub fn build_sparse_depth_maps(
    boxes: &[Box3D],
    cameras: &[CameraMatrix],
    range: &DepthRange,
    w_d: usize,
    h_d: usize,
    keep_raw: bool,
) -> Result<Vec<SparseDepthMap>> {
    cameras
        .iter()
        .map(|cam| {
            let valid: Vec<Box2D> = collect_valid_boxes(boxes, cam, range)
                .into_iter()
                .map(|v| v.rect)
                .collect();
            let raw = rasterize(&valid, w_d, h_d, cam.image_w, cam.image_h);
            let bins = discretize(&raw, range)?;
            Ok(SparseDepthMap {
                width: w_d,
                height: h_d,
                bins,
                raw: keep_raw.then_some(raw),
            })
        })
        .collect()
}

/// Binary PGM (`P5`) with `maxval = K`. Samples are one byte when
/// `K < 256` and two big-endian bytes otherwise, as Netpbm readers expect.
pub fn encode_pgm(map: &SparseDepthMap, num_bins: usize) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, num_bins).into_bytes();
    for &b in &map.bins {
        if num_bins < 256 {
            out.push(b as u8);
        } else {
            out.extend_from_slice(&b.to_be_bytes());
        }
    }
    out
}

/// Parses a PGM written by [`encode_pgm`]; returns the map and its maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<(SparseDepthMap, usize)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Data(format!(
            "not a binary PGM (magic {})",
            fields[0]
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Data(format!("bad PGM header field {s}: {e}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(Error::Data(format!("PGM maxval {maxval} out of range")));
    }
    let sample = if maxval < 256 { 1 } else { 2 };
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != width * height * sample {
        return Err(Error::Data(format!(
            "PGM body has {} bytes, expected {}",
            body.len(),
            width * height * sample
        )));
    }
    let bins: Vec<u16> = if sample == 1 {
        body.iter().map(|&b| b as u16).collect()
    } else {
        body.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if bins.iter().any(|&b| b as usize > maxval) {
        return Err(Error::Data(format!("PGM sample exceeds maxval {maxval}")));
    }
    Ok((
        SparseDepthMap {
            width,
            height,
            bins,
            raw: None,
        },
        maxval,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_range() -> DepthRange {
        DepthRange::new(0.0, 10.0, 4).unwrap()
    }

    #[test]
    fn edges_of_toy_range() {
        let r = toy_range();
        let edges: Vec<f64> = (0..=4).map(|i| r.edge(i)).collect();
        assert_eq!(edges, vec![0.0, 1.0, 3.0, 6.0, 10.0]);
    }

    #[test]
    fn lid_bin_cases() {
        let r = toy_range();
        assert_eq!(r.lid_bin(0.0).unwrap(), 1);
        assert_eq!(r.lid_bin(2.5).unwrap(), 2);
        assert_eq!(r.lid_bin(10.0 - 1e-9).unwrap(), 4);
        assert_eq!(r.lid_bin(10.0).unwrap(), 4);
        assert!(matches!(
            r.lid_bin(10.5),
            Err(Error::DepthOutOfRange { .. })
        ));
        assert!(r.lid_bin(-0.1).is_err());
        assert!(r.lid_bin(f64::NAN).is_err());
    }

    #[test]
    fn lid_depth_cases() {
        let r = toy_range();
        assert_eq!(r.lid_depth(1).unwrap(), 0.5);
        assert!(r.lid_depth(4).unwrap() < 10.0);
        assert!(matches!(r.lid_depth(0), Err(Error::Usage(_))));
        assert!(r.lid_depth(5).is_err());
    }

    #[test]
    fn invalid_ranges() {
        assert!(DepthRange::new(5.0, 5.0, 4).is_err());
        assert!(DepthRange::new(-1.0, 5.0, 4).is_err());
        assert!(DepthRange::new(0.0, 5.0, 1).is_err());
    }

    #[test]
    fn rasterize_empty_and_full() {
        assert!(rasterize(&[], 6, 2, 96, 32).iter().all(|&v| v == 0.0));
        let full = Box2D {
            u_min: 0.0,
            u_max: 96.0,
            v_min: 0.0,
            v_max: 32.0,
            depth: 7.0,
        };
        assert!(rasterize(&[full], 6, 2, 96, 32).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn nearest_box_wins() {
        let far = Box2D {
            u_min: 0.0,
            u_max: 50.0,
            v_min: 0.0,
            v_max: 32.0,
            depth: 20.0,
        };
        let near = Box2D {
            u_min: 30.0,
            u_max: 96.0,
            v_min: 0.0,
            v_max: 32.0,
            depth: 5.0,
        };
        let g = rasterize(&[far, near], 6, 2, 96, 32);
        // pixel centers at u = 8, 24, 40, 56, 72, 88
        assert_eq!(&g[..6], &[20.0, 20.0, 5.0, 5.0, 5.0, 5.0]);
        let g2 = rasterize(&[near, far], 6, 2, 96, 32);
        assert_eq!(g, g2);
    }

    #[test]
    fn boundary_is_half_open() {
        // pixel center u = 24 sits exactly on u_max -> excluded, on u_min -> included
        let b = Box2D {
            u_min: 24.0,
            u_max: 40.0,
            v_min: 0.0,
            v_max: 32.0,
            depth: 3.0,
        };
        let g = rasterize(&[b], 6, 2, 96, 32);
        assert_eq!(&g[..6], &[0.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pgm_round_trip() {
        let map = SparseDepthMap {
            width: 3,
            height: 2,
            bins: vec![0, 1, 2, 16, 0, 300],
            raw: None,
        };
        let bytes = encode_pgm(&map, 300);
        assert!(bytes.starts_with(b"P5\n3 2\n300\n"));
        let (back, maxval) = decode_pgm(&bytes).unwrap();
        assert_eq!(maxval, 300);
        assert_eq!(back, map);
        assert!(decode_pgm(b"P2\n1 1\n300\n").is_err());

        let small = SparseDepthMap {
            width: 2,
            height: 1,
            bins: vec![0, 16],
            raw: None,
        };
        let bytes = encode_pgm(&small, 16);
        assert_eq!(bytes, b"P5\n2 1\n16\n\x00\x10".to_vec());
        assert_eq!(decode_pgm(&bytes).unwrap().0, small);
    }
}
