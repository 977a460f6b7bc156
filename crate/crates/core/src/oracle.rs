//! Slow, direct reimplementations used to cross-check the fast paths.
//!
//! Nothing here calls the code it checks: projection, rasterization, LID
//! binning, matching and AP are each recomputed from their definitions.

use crate::depthmap::DepthRange;
use crate::geometry::{Box3D, CameraMatrix};
use crate::network::Detection;

fn project(t: &[f64; 12], p: [f64; 3]) -> Option<(f64, f64, f64)> {
    let r = |k: usize| t[4 * k] * p[0] + t[4 * k + 1] * p[1] + t[4 * k + 2] * p[2] + t[4 * k + 3];
    let d = r(2);
    if d.abs() < 1e-9 {
        return None;
    }
    Some((r(0) / d, r(1) / d, d))
}

fn corners(b: &Box3D) -> Vec<[f64; 3]> {
    let (s, c) = (b.theta.sin(), b.theta.cos());
    let mut out = Vec::with_capacity(8);
    for dx in [-0.5 * b.l, 0.5 * b.l] {
        for dy in [-0.5 * b.w, 0.5 * b.w] {
            for dz in [-0.5 * b.h, 0.5 * b.h] {
                out.push([b.x + dx * c - dy * s, b.y + dx * s + dy * c, b.z + dz]);
            }
        }
    }
    out
}

/// LID bin by scanning bin edges.
pub fn lid_bin_scan(d: f64, range: &DepthRange) -> usize {
    let k = range.num_bins;
    let kf = k as f64;
    let delta = 2.0 * (range.d_max - range.d_min) / (kf * (kf + 1.0));
    let edge = |i: usize| range.d_min + delta * (i * (i + 1)) as f64 / 2.0;
    (1..=k).find(|&i| d < edge(i)).unwrap_or(k)
}

/// Depth map of one camera, pixel by pixel: every box is re-projected for
/// every feature pixel and the nearest covering box wins.
pub fn depth_map_per_pixel(
    boxes: &[Box3D],
    cam: &CameraMatrix,
    range: &DepthRange,
    w_d: usize,
    h_d: usize,
) -> Vec<u16> {
    let t = cam.row_major();
    let (w, h) = (cam.image_w as f64, cam.image_h as f64);
    let mut out = vec![0u16; w_d * h_d];
    for row in 0..h_d {
        for col in 0..w_d {
            let u = (col as f64 + 0.5) * w / w_d as f64;
            let v = (row as f64 + 0.5) * h / h_d as f64;
            let mut best: Option<f64> = None;
            for b in boxes {
                let Some((_, _, dc)) = project(&t, [b.x, b.y, b.z]) else {
                    continue;
                };
                if dc < range.d_min || dc > range.d_max {
                    continue;
                }
                let pts: Vec<(f64, f64)> = corners(b)
                    .into_iter()
                    .filter_map(|p| project(&t, p))
                    .filter(|&(_, _, d)| d > 1e-6)
                    .map(|(pu, pv, _)| (pu, pv))
                    .collect();
                if pts.is_empty() {
                    continue;
                }
                let lo_u = pts
                    .iter()
                    .map(|p| p.0)
                    .fold(f64::INFINITY, f64::min)
                    .clamp(0.0, w);
                let hi_u = pts
                    .iter()
                    .map(|p| p.0)
                    .fold(f64::NEG_INFINITY, f64::max)
                    .clamp(0.0, w);
                let lo_v = pts
                    .iter()
                    .map(|p| p.1)
                    .fold(f64::INFINITY, f64::min)
                    .clamp(0.0, h);
                let hi_v = pts
                    .iter()
                    .map(|p| p.1)
                    .fold(f64::NEG_INFINITY, f64::max)
                    .clamp(0.0, h);
                let inside = u >= lo_u && u < hi_u && v >= lo_v && v < hi_v;
                if inside && best.is_none_or(|d| dc < d) {
                    best = Some(dc);
                }
            }
            out[row * w_d + col] = best.map_or(0, |d| lid_bin_scan(d, range) as u16);
        }
    }
    out
}

/// Minimum total cost over all injective maps of the smaller side into
/// the larger one, by exhaustive recursion.
pub fn brute_force_min_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    let at = |r: usize, c: usize| {
        if rows <= cols {
            cost[r * cols + c]
        } else {
            cost[c * cols + r]
        }
    };
    let (small, large) = (rows.min(cols), rows.max(cols));
    fn go(
        i: usize,
        small: usize,
        large: usize,
        used: &mut Vec<bool>,
        at: &dyn Fn(usize, usize) -> f64,
    ) -> f64 {
        if i == small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                best = best.min(at(i, j) + go(i + 1, small, large, used, at));
                used[j] = false;
            }
        }
        best
    }
    go(0, small, large, &mut vec![false; large], &at)
}

/// Straightforward AP: stable sort by score, nearest-unmatched matching by
/// linear scans, then the clipped 101-point recall integral.
pub fn ap_matcher(
    preds: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    class_id: usize,
    threshold: f64,
) -> f64 {
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (s, set) in preds.iter().enumerate() {
        for (i, d) in set.iter().enumerate() {
            if d.box3d.class_id == class_id {
                flat.push((d.score, s, i));
            }
        }
    }
    // insertion sort, descending, ties keep input order
    for a in 1..flat.len() {
        let mut b = a;
        while b > 0 && flat[b - 1].0 < flat[b].0 {
            flat.swap(b - 1, b);
            b -= 1;
        }
    }
    let mut npos = 0;
    for scene in gts {
        npos += scene.iter().filter(|g| g.class_id == class_id).count();
    }
    if npos == 0 {
        return 0.0;
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut tp = 0.0;
    for (k, &(_, s, i)) in flat.iter().enumerate() {
        let p = &preds[s][i].box3d;
        let mut pick = None;
        let mut pick_d = f64::INFINITY;
        if s < gts.len() {
            for (j, g) in gts[s].iter().enumerate() {
                let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
                if g.class_id == class_id && !used[s][j] && d <= threshold && d < pick_d {
                    pick = Some(j);
                    pick_d = d;
                }
            }
        }
        if let Some(j) = pick {
            used[s][j] = true;
            tp += 1.0;
        }
        recall.push(tp / npos as f64);
        precision.push(tp / (k + 1) as f64);
    }
    if recall.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for step in 11..=100 {
        let x = step as f64 / 100.0;
        let p = if x < recall[0] {
            precision[0]
        } else if x > recall[recall.len() - 1] {
            0.0
        } else if let Some(e) = recall.iter().position(|&r| r == x) {
            precision[e]
        } else {
            let j = recall.iter().rposition(|&r| r < x).unwrap();
            let f = (x - recall[j]) / (recall[j + 1] - recall[j]);
            precision[j] + f * (precision[j + 1] - precision[j])
        };
        total += if p > 0.1 { (p - 0.1) / 0.9 } else { 0.0 };
    }
    total / 90.0
}

/// Double loop over predictions and (camera, ground truth) pairs.
pub fn ray_duplicates_double_loop(
    preds: &[Detection],
    gts: &[Box3D],
    cameras: &[CameraMatrix],
    score_min: f64,
    angle_tol_deg: f64,
    depth_tol: f64,
    tp_threshold: f64,
) -> usize {
    // true positives: greedy per class in descending score order
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for &i in &order {
        let p = &preds[i].box3d;
        let mut pick: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
            if g.class_id == p.class_id
                && !used[j]
                && d <= tp_threshold
                && pick.is_none_or(|(_, pd)| d < pd)
            {
                pick = Some((j, d));
            }
        }
        if let Some((j, _)) = pick {
            used[j] = true;
            tp[i] = true;
        }
    }
    let mut count = 0;
    for (i, pred) in preds.iter().enumerate() {
        if tp[i] || pred.score < score_min {
            continue;
        }
        let mut hit = false;
        for cam in cameras {
            let o = cam.center();
            for g in gts {
                let a = [
                    pred.box3d.x - o[0],
                    pred.box3d.y - o[1],
                    pred.box3d.z - o[2],
                ];
                let b = [g.x - o[0], g.y - o[1], g.z - o[2]];
                let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let cos = ((a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb)).clamp(-1.0, 1.0);
                if cos.acos().to_degrees() <= angle_tol_deg && (na - nb).abs() > depth_tol {
                    hit = true;
                }
            }
        }
        count += hit as usize;
    }
    count
}

/// Sum of `-alpha_t (1 - p_t)^gamma ln p_t` over a logit grid, by scalars.
pub fn sigmoid_focal_sum(logits: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            let p = 1.0 / (1.0 + (-x).exp());
            let (pt, at) = if t > 0.5 {
                (p, alpha)
            } else {
                (1.0 - p, 1.0 - alpha)
            };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum()
}
