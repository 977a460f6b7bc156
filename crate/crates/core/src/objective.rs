//! Training objective: sigmoid focal classification, L1 box regression,
//! per-pixel depth focal loss, bipartite matching and their weighted sum.

use std::sync::atomic::{AtomicUsize, Ordering};

use crossdtr_tensor::{sigmoid, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::depthmap::SparseDepthMap;
use crate::error::{Error, Result};
use crate::network::encoding::REG_DIM;
use crate::network::HeadOutput;

static FOCAL_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Smallest probability the scalar focal loss will take a log of.
pub const FOCAL_P_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_class: f64,
    pub alpha_reg: f64,
    pub alpha_ddn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_class: 2.0,
            alpha_reg: 0.25,
            alpha_ddn: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_class", self.alpha_class),
            ("alpha_reg", self.alpha_reg),
            ("alpha_ddn", self.alpha_ddn),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// `-alpha (1 - p_t)^gamma ln p_t`. Non-positive `p_t` is clamped to
/// [`FOCAL_P_MIN`] and counted in [`focal_clamp_count`].
pub fn focal_loss(p_t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = if p_t <= 0.0 || p_t.is_nan() {
        FOCAL_CLAMPS.fetch_add(1, Ordering::Relaxed);
        FOCAL_P_MIN
    } else {
        p_t.min(1.0)
    };
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

pub fn focal_clamp_count() -> usize {
    FOCAL_CLAMPS.load(Ordering::Relaxed)
}

/// Element-wise sigmoid focal loss of `logits` against 0/1 `targets` (same shape).
/// Positives are weighted by `alpha`, negatives by `1 - alpha`.
pub fn sigmoid_focal(
    g: &mut Graph,
    logits: Var,
    targets: &Tensor,
    focal: FocalParams,
) -> Result<Var> {
    let t = g.constant(targets.clone());
    let not_t = g.constant(targets.map(|v| 1.0 - v));
    let weight = g.constant(targets.map(|v| focal.alpha * v + (1.0 - focal.alpha) * (1.0 - v)));

    let neg_logits = g.neg(logits);
    let log_p = g.log_sigmoid(logits);
    let log_not_p = g.log_sigmoid(neg_logits);
    let a = g.mul(t, log_p)?;
    let b = g.mul(not_t, log_not_p)?;
    let log_pt = g.add(a, b)?;

    let p = g.sigmoid(logits);
    let q = g.sigmoid(neg_logits);
    let a = g.mul(t, q)?;
    let b = g.mul(not_t, p)?;
    let one_minus_pt = g.add(a, b)?;
    let modulator = g.powf(one_minus_pt, focal.gamma);

    let l = g.mul(modulator, log_pt)?;
    let l = g.mul(l, weight)?;
    Ok(g.neg(l))
}

/// Per-pixel softmax focal loss of depth logits `[N, K+1, H_d, W_d]`
/// against bin targets, averaged over pixels and cameras.
pub fn ddn_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[SparseDepthMap],
    focal: FocalParams,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 4 || shape[0] != targets.len() {
        return Err(Error::Data(format!(
            "depth logits {shape:?} do not match {} target maps",
            targets.len()
        )));
    }
    let (n, classes, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut one_hot = vec![0.0; n * classes * h * w];
    for (cam, map) in targets.iter().enumerate() {
        if map.width != w || map.height != h {
            return Err(Error::Data(format!(
                "depth target {}x{} does not match logits {w}x{h}",
                map.width, map.height
            )));
        }
        for (px, &bin) in map.bins.iter().enumerate() {
            let bin = bin as usize;
            if bin >= classes {
                return Err(Error::Data(format!(
                    "depth bin {bin} out of range 0..{classes}"
                )));
            }
            one_hot[(cam * classes + bin) * h * w + px] = 1.0;
        }
    }
    let t = g.constant(Tensor::new(shape, one_hot)?);
    let log_p = g.log_softmax(logits, 1)?;
    let picked = g.mul(log_p, t)?;
    let log_pt = g.sum_axis(picked, 1)?;
    let p_t = g.exp(log_pt);
    let neg = g.neg(p_t);
    let one_minus = g.add_scalar(neg, 1.0);
    let modulator = g.powf(one_minus, focal.gamma);
    let l = g.mul(modulator, log_pt)?;
    let l = g.scale(l, -focal.alpha);
    Ok(g.mean(l))
}

/// Result of bipartite matching.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(prediction, ground truth)` sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &[f64], num_gt: usize) -> f64 {
        self.pairs
            .iter()
            .map(|&(p, gt)| cost[p * num_gt + gt])
            .sum()
    }
}

/// Dense O(n^2 m) shortest augmenting path solver for `n <= m`.
/// Returns the column of every row, the row and column potentials and the total cost.
fn solve_rect(cost: &[f64], n: usize, m: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>, f64) {
    let at = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i * m + col_of[i]]).sum();
    (col_of, u[1..].to_vec(), v[1..].to_vec(), total)
}

/// Solves the sub-problem on `rows` x `cols` of an `n x m` matrix.
fn solve_subset(cost: &[f64], m: usize, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    if rows.is_empty() {
        return (Vec::new(), 0.0);
    }
    let sub: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| cost[r * m + c]))
        .collect();
    let (col_of, _, _, total) = solve_rect(&sub, rows.len(), cols.len());
    (col_of.into_iter().map(|c| cols[c]).collect(), total)
}

/// Minimum-cost assignment with rows = smaller side. Among optimal
/// assignments the sequence of partner columns, in row order, is the
/// lexicographically smallest (costs equal within 1e-9 relative).
fn lexmin_assignment(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    let (mut col_of, u, v, best) = solve_rect(cost, n, m);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut fixed_cost = 0.0;
    let mut free_cols: Vec<usize> = (0..m).collect();
    for r in 0..n {
        let current = col_of[r];
        let rest_rows: Vec<usize> = (r + 1..n).collect();
        for &c in free_cols.iter().take_while(|&&c| c < current) {
            // only tight edges can appear in an optimal assignment
            if cost[r * m + c] - u[r] - v[c] > tol {
                continue;
            }
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let (sub, sub_cost) = solve_subset(cost, m, &rest_rows, &cols);
            if (fixed_cost + cost[r * m + c] + sub_cost - best).abs() <= tol {
                col_of[r] = c;
                col_of[r + 1..].copy_from_slice(&sub);
                break;
            }
        }
        fixed_cost += cost[r * m + col_of[r]];
        free_cols.retain(|&x| x != col_of[r]);
    }
    col_of
}

/// Minimum-total-cost matching of a row-major `preds x gts` cost matrix.
pub fn hungarian(cost: &[f64], preds: usize, gts: usize) -> Result<Assignment> {
    if cost.len() != preds * gts {
        return Err(Error::Data(format!(
            "cost matrix has {} entries, expected {preds}x{gts}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite matching cost {bad}")));
    }
    let mut pairs = Vec::with_capacity(preds.min(gts));
    if preds > 0 && gts > 0 {
        if gts <= preds {
            let t: Vec<f64> = (0..gts)
                .flat_map(|j| (0..preds).map(move |i| cost[i * gts + j]))
                .collect();
            for (gt, p) in lexmin_assignment(&t, gts, preds).into_iter().enumerate() {
                pairs.push((p, gt));
            }
        } else {
            for (p, gt) in lexmin_assignment(cost, preds, gts).into_iter().enumerate() {
                pairs.push((p, gt));
            }
            pairs.sort_by_key(|&(_, gt)| gt);
        }
    }
    let mut matched = vec![false; preds];
    for &(p, _) in &pairs {
        matched[p] = true;
    }
    let unmatched = (0..preds).filter(|&p| !matched[p]).collect();
    Ok(Assignment { pairs, unmatched })
}

/// `alpha_class * (-p) + alpha_reg * L1(pred_enc, gt_enc)`.
pub fn match_cost(prob_of_gt_class: f64, pred_enc: &[f64], gt_enc: &[f64], w: &LossWeights) -> f64 {
    let l1: f64 = pred_enc
        .iter()
        .zip(gt_enc)
        .map(|(a, b)| (a - b).abs())
        .sum();
    -w.alpha_class * prob_of_gt_class + w.alpha_reg * l1
}

/// Ground truth of one scene in regression space.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub classes: Vec<usize>,
    /// `REG_DIM` values per box.
    pub encoded: Vec<[f64; REG_DIM]>,
}

#[derive(Debug, Clone)]
pub struct DetectionLoss {
    /// `alpha_class * class + alpha_reg * reg`
    pub total: Var,
    pub class: Var,
    pub reg: Var,
    pub assignment: Assignment,
}

/// Matching plus focal classification (averaged over queries) and L1
/// regression (averaged over matched pairs) for one decoder layer.
pub fn detection_loss(
    g: &mut Graph,
    head: &HeadOutput,
    targets: &Targets,
    w: &LossWeights,
    focal: FocalParams,
) -> Result<DetectionLoss> {
    let lshape = g.shape(head.logits).to_vec();
    let (q, k) = (lshape[0], lshape[1]);
    let gts = targets.classes.len();
    if let Some(&c) = targets.classes.iter().find(|&&c| c >= k) {
        return Err(Error::Data(format!(
            "ground-truth class {c} out of range 0..{k}"
        )));
    }
    let logits = g.value(head.logits).data();
    let enc = g.value(head.encoded).data();
    let mut cost = Vec::with_capacity(q * gts);
    for i in 0..q {
        for j in 0..gts {
            let p = sigmoid(logits[i * k + targets.classes[j]]);
            cost.push(match_cost(
                p,
                &enc[i * REG_DIM..(i + 1) * REG_DIM],
                &targets.encoded[j],
                w,
            ));
        }
    }
    let assignment = hungarian(&cost, q, gts)?;

    let mut onehot = vec![0.0; q * k];
    for &(p, gt) in &assignment.pairs {
        onehot[p * k + targets.classes[gt]] = 1.0;
    }
    let fl = sigmoid_focal(g, head.logits, &Tensor::new(vec![q, k], onehot)?, focal)?;
    let class_sum = g.sum(fl);
    let class = g.scale(class_sum, 1.0 / q as f64);

    let reg = if assignment.pairs.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let gt_enc: Vec<f64> = assignment
            .pairs
            .iter()
            .flat_map(|&(_, gt)| targets.encoded[gt])
            .collect();
        let picked = g.select_rows(head.encoded, &rows)?;
        let gt = g.constant(Tensor::new(vec![rows.len(), REG_DIM], gt_enc)?);
        let diff = g.sub(picked, gt)?;
        let abs = g.abs(diff);
        let s = g.sum(abs);
        g.scale(s, 1.0 / rows.len() as f64)
    };

    let a = g.scale(class, w.alpha_class);
    let b = g.scale(reg, w.alpha_reg);
    let total = g.add(a, b)?;
    Ok(DetectionLoss {
        total,
        class,
        reg,
        assignment,
    })
}

/// Mean of per-layer detection losses plus `alpha_ddn * ddn`.
pub fn total_loss(g: &mut Graph, layer_losses: &[Var], ddn: Var, w: &LossWeights) -> Result<Var> {
    if layer_losses.is_empty() {
        return Err(Error::Usage(
            "total_loss needs at least one decoder layer loss".into(),
        ));
    }
    let stacked: Vec<Var> = layer_losses
        .iter()
        .map(|&l| g.reshape(l, &[1]))
        .collect::<std::result::Result<_, _>>()?;
    let cat = g.concat(&stacked, 0)?;
    let det = g.mean(cat);
    let depth = g.scale(ddn, w.alpha_ddn);
    Ok(g.add(det, depth)?)
}
