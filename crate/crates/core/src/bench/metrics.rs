//! Distance-threshold detection metrics and the ray-duplicate diagnostic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D, CameraMatrix, Point3};
use crate::network::{Detection, DetectionSet};

/// Matching threshold for translation, scale and orientation errors.
pub const TP_THRESHOLD: f64 = 2.0;
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Precision and recall below 0.1 discarded, rest rescaled to [0, 1].
    #[default]
    Clipped,
    /// Mean interpolated precision over the full recall axis.
    Plain,
}

pub fn bev_distance(a: &Box3D, b: &Box3D) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrSample {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// One sample per prediction of the class, by descending score.
    pub pr: Vec<PrSample>,
    /// True when the class has no ground truth (AP reported as 0).
    pub no_gt: bool,
    /// Matched `(scene, prediction index, gt index)` triples.
    pub matches: Vec<(usize, usize, usize)>,
}

/// Predictions of one class across scenes, sorted by descending score with
/// ties kept in (scene, index) order.
fn ranked(preds: &[DetectionSet], class_id: usize) -> Vec<(usize, usize, f64)> {
    let mut out: Vec<(usize, usize, f64)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, set)| {
            set.iter()
                .enumerate()
                .filter(|(_, d)| d.box3d.class_id == class_id)
                .map(move |(i, d)| (s, i, d.score))
        })
        .collect();
    out.sort_by(|a, b| b.2.total_cmp(&a.2));
    out
}

/// Greedy matching in descending score order: each prediction takes the
/// nearest unmatched same-class ground truth within `threshold`.
pub fn greedy_match(
    preds: &[DetectionSet],
    gts: &[Vec<Box3D>],
    class_id: usize,
    threshold: f64,
) -> (Vec<(usize, usize, f64)>, Vec<Option<usize>>, usize) {
    let order = ranked(preds, class_id);
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hit = Vec::with_capacity(order.len());
    for &(s, i, _) in &order {
        let p = &preds[s][i].box3d;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.get(s).into_iter().flatten().enumerate() {
            if g.class_id != class_id || taken[s][j] {
                continue;
            }
            let d = bev_distance(p, g);
            if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            taken[s][j] = true;
        }
        hit.push(best.map(|(j, _)| j));
    }
    let npos = gts
        .iter()
        .flatten()
        .filter(|g| g.class_id == class_id)
        .count();
    (order, hit, npos)
}

/// Piecewise-linear `np.interp(x, xp, fp, right = 0)`, except that a grid
/// point landing exactly on a repeated recall takes the first (highest)
/// precision there: false positives ranked after a recall level is reached
/// only make the curve drop vertically, which encloses no area.
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let n = xp.len();
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[n - 1] {
        return 0.0;
    }
    let first = xp.partition_point(|&v| v < x);
    if xp[first] == x {
        return fp[first];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let t = (x - xp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + t * (fp[j + 1] - fp[j])
}

/// AP from a precision/recall sweep sampled on 101 recall points.
pub fn ap_from_pr(pr: &[PrSample], mode: ApMode) -> f64 {
    if pr.is_empty() {
        return 0.0;
    }
    let rec: Vec<f64> = pr.iter().map(|s| s.recall).collect();
    let prec: Vec<f64> = pr.iter().map(|s| s.precision).collect();
    let grid: Vec<f64> = (0..=100)
        .map(|i| interp(i as f64 / 100.0, &rec, &prec))
        .collect();
    match mode {
        Mode::Clipped => {
            let kept = &grid[11..];
            let sum: f64 = kept.iter().map(|p| (p - 0.1).max(0.0) / 0.9).sum();
            (sum / kept.len() as f64).min(1.0)
        }
        Mode::Plain => grid.iter().sum::<f64>() / grid.len() as f64,
    }
}

use ApMode as Mode;

pub fn ap_at_threshold(
    preds: &[DetectionSet],
    gts: &[Vec<Box3D>],
    class_id: usize,
    threshold: f64,
    mode: ApMode,
) -> ApResult {
    let (order, hit, npos) = greedy_match(preds, gts, class_id, threshold);
    let matches = order
        .iter()
        .zip(&hit)
        .filter_map(|(&(s, i, _), h)| h.map(|j| (s, i, j)))
        .collect();
    if npos == 0 {
        return ApResult {
            ap: 0.0,
            pr: Vec::new(),
            no_gt: true,
            matches,
        };
    }
    let mut tp = 0usize;
    let pr: Vec<PrSample> = order
        .iter()
        .zip(&hit)
        .enumerate()
        .map(|(k, (&(_, _, score), h))| {
            tp += h.is_some() as usize;
            PrSample {
                score,
                recall: tp as f64 / npos as f64,
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect();
    ApResult {
        ap: ap_from_pr(&pr, mode),
        pr,
        no_gt: false,
        matches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub matched: usize,
    /// No matches: errors are reported as 1.0.
    pub no_match: bool,
}

/// 1 - IoU of two boxes sharing center and yaw.
pub fn aligned_iou_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter = a.l.min(b.l) * a.w.min(b.w) * a.h.min(b.h);
    1.0 - inter / (a.volume() + b.volume() - inter)
}

/// Smallest absolute yaw difference, in `[0, pi]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

pub fn tp_errors(pairs: &[(Box3D, Box3D)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors {
            mate: 1.0,
            mase: 1.0,
            maoe: 1.0,
            matched: 0,
            no_match: true,
        };
    }
    let n = pairs.len() as f64;
    TpErrors {
        mate: pairs.iter().map(|(p, g)| bev_distance(p, g)).sum::<f64>() / n,
        mase: pairs
            .iter()
            .map(|(p, g)| aligned_iou_error(p, g))
            .sum::<f64>()
            / n,
        maoe: pairs
            .iter()
            .map(|(p, g)| yaw_error(p.theta, g.theta))
            .sum::<f64>()
            / n,
        matched: pairs.len(),
        no_match: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RayDuplicateParams {
    pub score_min: f64,
    pub angle_tol_deg: f64,
    pub depth_tol: f64,
    /// Predictions matched at this distance count as true positives.
    pub tp_threshold: f64,
}

impl Default for RayDuplicateParams {
    fn default() -> Self {
        Self {
            score_min: 0.3,
            angle_tol_deg: 1.0,
            depth_tol: 2.0,
            tp_threshold: 1.0,
        }
    }
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// High-score false positives lying on a ground-truth center's viewing ray
/// (within the angle tolerance, from any camera) at a different range.
pub fn ray_duplicate_count(
    preds: &DetectionSet,
    gts: &[Box3D],
    cameras: &[CameraMatrix],
    params: &RayDuplicateParams,
) -> usize {
    let scene_preds = std::slice::from_ref(preds);
    let scene_gts = std::slice::from_ref(&gts.to_vec()).to_vec();
    let mut is_tp = vec![false; preds.len()];
    let classes: std::collections::BTreeSet<usize> =
        preds.iter().map(|d| d.box3d.class_id).collect();
    for class_id in classes {
        let (order, hit, _) = greedy_match(scene_preds, &scene_gts, class_id, params.tp_threshold);
        for (&(_, i, _), h) in order.iter().zip(&hit) {
            is_tp[i] |= h.is_some();
        }
    }
    let cos_tol = params.angle_tol_deg.to_radians().cos();
    let centers: Vec<Point3> = cameras.iter().map(|c| c.center()).collect();
    preds
        .iter()
        .enumerate()
        .filter(|(i, d)| d.score >= params.score_min && !is_tp[*i])
        .filter(|(_, d)| {
            centers.iter().any(|&c| {
                let rp = sub(d.box3d.center(), c);
                let np = norm(rp);
                gts.iter().any(|g| {
                    let rg = sub(g.center(), c);
                    let ng = norm(rg);
                    if np == 0.0 || ng == 0.0 {
                        return false;
                    }
                    let cos = (rp[0] * rg[0] + rp[1] * rg[1] + rp[2] * rg[2]) / (np * ng);
                    cos >= cos_tol && (np - ng).abs() > params.depth_tol
                })
            })
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub num_pred: usize,
    /// `(threshold, AP)` per distance threshold.
    pub ap: Vec<(f64, f64)>,
    pub no_gt: bool,
    pub tp_errors: TpErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Vec<f64>,
    pub ap_mode: ApMode,
    pub classes: Vec<ClassMetrics>,
    /// Mean AP over classes with ground truth and all thresholds.
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub ray_duplicates: usize,
    pub scenes: usize,
    #[serde(skip)]
    pub pr_rows: Vec<PrRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrRow {
    pub class: String,
    pub threshold: f64,
    pub sample: PrSample,
}

/// Everything needed to evaluate one scene.
#[derive(Debug, Clone)]
pub struct EvalScene<'a> {
    pub preds: &'a [Detection],
    pub gts: &'a [Box3D],
    pub cameras: &'a [CameraMatrix],
}

pub fn evaluate(
    scenes: &[EvalScene<'_>],
    class_names: &[&str],
    thresholds: &[f64],
    mode: ApMode,
    ray: &RayDuplicateParams,
) -> MetricReport {
    let preds: Vec<DetectionSet> = scenes.iter().map(|s| s.preds.to_vec()).collect();
    let gts: Vec<Vec<Box3D>> = scenes.iter().map(|s| s.gts.to_vec()).collect();
    let mut classes = Vec::with_capacity(class_names.len());
    let mut pr_rows = Vec::new();
    for (class_id, &name) in class_names.iter().enumerate() {
        let mut ap = Vec::with_capacity(thresholds.len());
        let mut no_gt = false;
        for &t in thresholds {
            let r = ap_at_threshold(&preds, &gts, class_id, t, mode);
            no_gt = r.no_gt;
            pr_rows.extend(r.pr.iter().map(|&sample| PrRow {
                class: name.to_string(),
                threshold: t,
                sample,
            }));
            ap.push((t, r.ap));
        }
        let tp = ap_at_threshold(&preds, &gts, class_id, TP_THRESHOLD, mode);
        let pairs: Vec<(Box3D, Box3D)> = tp
            .matches
            .iter()
            .map(|&(s, i, j)| (preds[s][i].box3d, gts[s][j]))
            .collect();
        classes.push(ClassMetrics {
            class_id,
            name: name.to_string(),
            num_gt: gts
                .iter()
                .flatten()
                .filter(|g| g.class_id == class_id)
                .count(),
            num_pred: preds
                .iter()
                .flatten()
                .filter(|d| d.box3d.class_id == class_id)
                .count(),
            ap,
            no_gt,
            tp_errors: tp_errors(&pairs),
        });
    }
    let scored: Vec<&ClassMetrics> = classes.iter().filter(|c| !c.no_gt).collect();
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|c| f(c)).sum::<f64>() / scored.len() as f64
        }
    };
    let map = mean(&|c| c.ap.iter().map(|a| a.1).sum::<f64>() / c.ap.len().max(1) as f64);
    let (mate, mase, maoe) = if scored.is_empty() {
        (1.0, 1.0, 1.0)
    } else {
        (
            mean(&|c| c.tp_errors.mate),
            mean(&|c| c.tp_errors.mase),
            mean(&|c| c.tp_errors.maoe),
        )
    };
    let ray_duplicates = scenes
        .iter()
        .map(|s| ray_duplicate_count(&s.preds.to_vec(), s.gts, s.cameras, ray))
        .sum();
    MetricReport {
        thresholds: thresholds.to_vec(),
        ap_mode: mode,
        classes,
        map,
        mate,
        mase,
        maoe,
        ray_duplicates,
        scenes: scenes.len(),
        pr_rows,
    }
}

impl MetricReport {
    pub fn ap(&self, class_id: usize, threshold: f64) -> Option<f64> {
        self.classes
            .get(class_id)?
            .ap
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|&(_, ap)| ap)
    }

    /// Mean AP over scored classes at one threshold.
    pub fn map_at(&self, threshold: f64) -> f64 {
        let vals: Vec<f64> = self
            .classes
            .iter()
            .filter(|c| !c.no_gt)
            .filter_map(|c| c.ap.iter().find(|(t, _)| *t == threshold).map(|a| a.1))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut out = String::from("class,threshold,score,recall,precision\n");
        for r in &self.pr_rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.class, r.threshold, r.sample.score, r.sample.recall, r.sample.precision
            ));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>_pr.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}_pr.csv"));
        std::fs::write(&csv, self.pr_csv()).map_err(|e| Error::io(&csv, e))
    }
}
