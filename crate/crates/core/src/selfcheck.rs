//! Oracle suites behind `selfcheck`: gradients, depth maps, matching, LID
//! binning and the AP metric.

use std::time::Instant;

use crossdtr_tensor::gradcheck::{check_inputs, check_params, GradCheckOptions, GradCheckReport};
use crossdtr_tensor::nn::{LayerNorm, Linear, MultiHeadAttention};
use crossdtr_tensor::{Graph, ParamStore, Precision, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::metrics::{
    ap_at_threshold, ray_duplicate_count, ApMode, RayDuplicateParams, DEFAULT_THRESHOLDS,
};
use crate::bench::scene::{generate_scene, SceneConfig};
use crate::depthmap::{build_sparse_depth_maps, DepthRange, SparseDepthMap};
use crate::error::Result;
use crate::geometry::Box3D;
use crate::network::{CrossDtr, Detection, ModelConfig};
use crate::objective::{ddn_loss, hungarian, sigmoid_focal, FocalParams, LossWeights};
use crate::oracle;
use crate::train::{scene_loss, SceneData};

pub const PER_OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub type FocalFn = fn(&mut Graph, Var, &Tensor, FocalParams) -> Result<Var>;

/// Implementations under test; swapped out by mutation tests.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub sigmoid_focal: FocalFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Self { sigmoid_focal }
    }
}

#[derive(Clone, Copy)]
pub struct SelfCheckOptions {
    pub hooks: Hooks,
    pub seed: u64,
    pub depth_scenes: usize,
    pub hungarian_trials: usize,
    pub ap_cases: usize,
    /// Sampled coordinates per parameter tensor in the end-to-end check.
    pub e2e_coords: usize,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            hooks: Hooks::default(),
            seed: 0,
            depth_scenes: 100,
            hungarian_trials: 20,
            ap_cases: 200,
            e2e_coords: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn from_error(name: &str, r: Result<CheckResult>) -> CheckResult {
    r.unwrap_or_else(|e| result(name, false, format!("error: {e}")))
}

pub fn run(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.extend(op_gradients(opts));
    out.push(from_error("gradient: end-to-end model", end_to_end(opts)));
    out.push(from_error("focal loss vs scalar oracle", focal_value(opts)));
    out.push(from_error(
        "depth maps vs per-pixel oracle",
        depth_maps(opts),
    ));
    out.push(hungarian_brute_force(opts));
    out.push(lid_round_trip());
    out.push(from_error("ap vs matcher oracle", ap_oracle(opts)));
    out.push(ray_duplicate_oracle(opts));
    out
}

/// One line per check and a final tally.
pub fn summary(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{} {}: {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        ));
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        s.push_str(&format!("selfcheck: all {} checks passed\n", results.len()));
    } else {
        s.push_str(&format!(
            "selfcheck: {} failed: {}\n",
            failed.len(),
            failed.join(", ")
        ));
    }
    s
}

fn grad_result(
    name: &str,
    report: crossdtr_tensor::Result<GradCheckReport>,
    tol: f64,
) -> CheckResult {
    match report {
        Ok(r) => result(
            name,
            r.checked > 0 && r.max_rel_err < tol,
            format!(
                "{} coords, max rel err {:.2e} (tol {tol:.0e})",
                r.checked, r.max_rel_err
            ),
        ),
        Err(e) => result(name, false, format!("error: {e}")),
    }
}

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), scale, rng)
}

/// Scalar head `sum(y * w)` with fixed random `w`.
fn probe(g: &mut Graph, y: Var, seed: u64) -> crossdtr_tensor::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> crossdtr_tensor::Result<Var>>;

fn op_gradients(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x96ad);
    let gc = GradCheckOptions::default();
    let mut cases: Vec<(&str, Vec<Tensor>, OpFn)> = Vec::new();
    let m = |r: &mut ChaCha8Rng, s: &[usize]| uniform(s, 1.0, r);
    cases.push((
        "matmul",
        vec![m(&mut rng, &[2, 3, 4]), m(&mut rng, &[4, 5])],
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 1)
        }),
    ));
    cases.push((
        "add/sub/mul/div broadcast",
        vec![m(&mut rng, &[3, 4]), m(&mut rng, &[4]).map(|x| x + 2.0)],
        Box::new(|g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.mul(b, v[1])?;
            let d = g.div(c, v[1])?;
            let e = g.mul(d, a)?;
            probe(g, e, 2)
        }),
    ));
    cases.push((
        "elementwise unary",
        vec![m(&mut rng, &[12]).map(|x| x + 0.05 * x.signum())],
        Box::new(|g, v| {
            let x = v[0];
            let sq = g.mul(x, x)?;
            let pos = g.add_scalar(sq, 0.5);
            let mut terms = vec![g.exp(x), g.log(pos), g.abs(x), g.gelu(x), g.sigmoid(x)];
            terms.push(g.log_sigmoid(x));
            terms.push(g.tanh(x));
            terms.push(g.sin(x));
            terms.push(g.cos(x));
            terms.push(g.powf(pos, 1.5));
            terms.push(g.neg(x));
            terms.push(g.scale(x, 3.0));
            let all = g.concat(&terms, 0)?;
            probe(g, all, 3)
        }),
    ));
    cases.push((
        "softmax/log_softmax",
        vec![uniform(&[2, 5, 3], 2.0, &mut rng)],
        Box::new(|g, v| {
            let a = g.softmax(v[0], 1)?;
            let b = g.log_softmax(v[0], 2)?;
            let c = g.concat(&[a, b], 0)?;
            probe(g, c, 4)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![
            uniform(&[3, 6], 2.0, &mut rng),
            m(&mut rng, &[6]),
            m(&mut rng, &[6]),
        ],
        Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y, 5)
        }),
    ));
    cases.push((
        "reshape/permute/transpose/concat/narrow/select_rows",
        vec![m(&mut rng, &[2, 3, 4])],
        Box::new(|g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            let t = g.transpose(p, 0, 2)?;
            let r = g.reshape(t, &[6, 4])?;
            let n = g.narrow(r, 0, 1, 4)?;
            let s = g.select_rows(n, &[3, 0, 3])?;
            let c = g.concat(&[s, n], 0)?;
            probe(g, c, 6)
        }),
    ));
    cases.push((
        "sum_axis/mean_axis/sum/mean",
        vec![m(&mut rng, &[3, 4, 2])],
        Box::new(|g, v| {
            let a = g.sum_axis(v[0], 1)?;
            let b = g.mean_axis(v[0], 1)?;
            let c = g.mul(a, b)?;
            let s = probe(g, c, 7)?;
            let t = g.mean(v[0]);
            let u = g.mul(t, t)?;
            g.add(s, u)
        }),
    ));
    cases.push((
        "conv2d",
        vec![m(&mut rng, &[2, 3, 7, 6]), m(&mut rng, &[4, 3, 3, 3])],
        Box::new(|g, v| {
            let a = g.conv2d(v[0], v[1], 1, 1)?;
            let b = g.conv2d(v[0], v[1], 2, 1)?;
            let pa = probe(g, a, 8)?;
            let pb = probe(g, b, 9)?;
            g.add(pa, pb)
        }),
    ));
    cases.push((
        "linear",
        vec![
            m(&mut rng, &[4, 5]),
            m(&mut rng, &[5, 3]),
            m(&mut rng, &[3]),
        ],
        Box::new(|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y, 10)
        }),
    ));
    let focal = opts.hooks.sigmoid_focal;
    let p = FocalParams::default();
    let targets = Tensor::new(
        vec![4, 3],
        (0..12).map(|i| (i % 5 == 0) as u8 as f64).collect(),
    )
    .expect("shape");
    cases.push((
        "sigmoid_focal",
        vec![uniform(&[4, 3], 3.0, &mut rng)],
        Box::new(move |g, v| {
            let y = focal(g, v[0], &targets, p)
                .map_err(|e| crossdtr_tensor::TensorError::Usage(e.to_string()))?;
            Ok(g.sum(y))
        }),
    ));
    let depth = vec![SparseDepthMap {
        width: 3,
        height: 2,
        bins: vec![0, 1, 4, 2, 0, 3],
        raw: None,
    }];
    cases.push((
        "ddn_loss",
        vec![uniform(&[1, 5, 2, 3], 2.0, &mut rng)],
        Box::new(move |g, v| {
            ddn_loss(g, v[0], &depth, p)
                .map_err(|e| crossdtr_tensor::TensorError::Usage(e.to_string()))
        }),
    ));

    let mut out: Vec<CheckResult> = cases
        .into_iter()
        .map(|(name, inputs, f)| {
            grad_result(
                &format!("gradient: {name}"),
                check_inputs(&inputs, f, gc),
                PER_OP_TOL,
            )
        })
        .collect();

    let mut store = ParamStore::new(Precision::F64);
    let layers = (|| -> crossdtr_tensor::Result<_> {
        let lin = Linear::new(&mut store, "lin", 6, 6, true, &mut rng)?;
        let ln = LayerNorm::new(&mut store, "ln", 6)?;
        let mha = MultiHeadAttention::new(&mut store, "mha", 6, 2, &mut rng)?;
        Ok((lin, ln, mha))
    })();
    let q = uniform(&[3, 6], 1.0, &mut rng);
    let kv = uniform(&[5, 6], 1.0, &mut rng);
    let report = layers.and_then(|(lin, ln, mha)| {
        let f = |g: &mut Graph, s: &ParamStore| {
            let qv = g.constant(q.clone());
            let kvv = g.constant(kv.clone());
            let x = lin.forward(g, s, qv)?;
            let x = ln.forward(g, s, x)?;
            let y = mha.forward(g, s, x, kvv, kvv)?;
            probe(g, y, 11)
        };
        check_params(&store, f, None, 0, gc)
    });
    out.push(grad_result(
        "gradient: linear/layer_norm/attention params",
        report,
        PER_OP_TOL,
    ));
    out
}

/// Small model configuration for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        num_queries: 6,
        hidden_dim: 8,
        depth_range: DepthRange {
            d_min: 1.0,
            d_max: 61.2,
            num_bins: 4,
        },
        feature_stride: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_scene_config() -> SceneConfig {
    SceneConfig {
        image_w: 32,
        image_h: 16,
        box_count: [2, 3],
        ..SceneConfig::default()
    }
}

fn end_to_end(opts: &SelfCheckOptions) -> Result<CheckResult> {
    let cfg = tiny_model_config();
    let model = CrossDtr::new(cfg.clone(), opts.seed, Precision::F64)?;
    let scene = generate_scene(opts.seed + 1, &tiny_scene_config())?;
    let data = SceneData::prepare(scene, &cfg)?;
    let loss = LossWeights::default();
    let f = |g: &mut Graph, store: &ParamStore| {
        scene_loss(g, &model, store, &data, &loss, FocalParams::default())
            .map(|(v, _)| v)
            .map_err(|e| crossdtr_tensor::TensorError::Usage(e.to_string()))
    };
    let report = check_params(
        &model.store,
        f,
        Some(opts.e2e_coords),
        opts.seed,
        GradCheckOptions::default(),
    );
    Ok(grad_result(
        "gradient: end-to-end model",
        report,
        END_TO_END_TOL,
    ))
}

fn focal_value(opts: &SelfCheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xf0ca1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let logits = uniform(&[5, 3], 6.0, &mut rng);
        let targets: Vec<f64> = (0..15).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
        let p = FocalParams {
            alpha: rng.gen_range(0.05..0.95),
            gamma: rng.gen_range(0.0..3.0),
        };
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(logits.clone());
        let fl =
            (opts.hooks.sigmoid_focal)(&mut g, x, &Tensor::new(vec![5, 3], targets.clone())?, p)?;
        let s = g.sum(fl);
        let got = g.item(s)?;
        let want = oracle::sigmoid_focal_sum(logits.data(), &targets, p.alpha, p.gamma);
        worst = worst.max((got - want).abs() / want.abs().max(1e-12));
    }
    Ok(result(
        "focal loss vs scalar oracle",
        worst < 1e-9,
        format!("20 random grids, max rel diff {worst:.2e}"),
    ))
}

fn depth_maps(opts: &SelfCheckOptions) -> Result<CheckResult> {
    let range = DepthRange::default();
    let mut compared = 0usize;
    let mut mismatched = Vec::new();
    for i in 0..opts.depth_scenes {
        let seed = opts.seed * 1_000_003 + i as u64;
        let cfg = SceneConfig {
            num_cameras: 1 + i % 6,
            box_count: [1, 8],
            distance: [0.5, 40.0],
            bounds: crate::network::SceneBounds {
                min: [-50.0, -50.0, -3.0],
                max: [50.0, 50.0, 1.0],
            },
            ..SceneConfig::default()
        };
        let scene = generate_scene(seed, &cfg)?;
        for (w_d, h_d) in [(96, 32), (6, 2), (48, 16)] {
            let maps =
                build_sparse_depth_maps(&scene.boxes, &scene.cameras, &range, w_d, h_d, false)?;
            for (cam, map) in scene.cameras.iter().zip(&maps) {
                compared += 1;
                if map.bins != oracle::depth_map_per_pixel(&scene.boxes, cam, &range, w_d, h_d) {
                    mismatched.push(seed);
                }
            }
        }
    }
    mismatched.dedup();
    Ok(result(
        "depth maps vs per-pixel oracle",
        mismatched.is_empty(),
        format!(
            "{} scenes, {compared} maps, mismatching seeds {:?}",
            opts.depth_scenes, mismatched
        ),
    ))
}

fn hungarian_brute_force(opts: &SelfCheckOptions) -> CheckResult {
    let name = "hungarian vs brute force";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4a11);
    let mut worst: f64 = 0.0;
    let mut shapes = vec![(7, 7); opts.hungarian_trials];
    shapes.extend([(5, 7), (7, 4), (1, 6), (3, 3)]);
    for (r, c) in shapes {
        let cost: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = match hungarian(&cost, r, c) {
            Ok(a) => a,
            Err(e) => return result(name, false, format!("error: {e}")),
        };
        let got = a.total_cost(&cost, c);
        let want = oracle::brute_force_min_cost(&cost, r, c);
        worst = worst.max((got - want).abs());
        if a.pairs.len() != r.min(c) {
            return result(name, false, format!("{r}x{c}: {} pairs", a.pairs.len()));
        }
    }
    result(
        name,
        worst < 1e-9,
        format!(
            "{} 7x7 + 4 rectangular, max cost gap {worst:.2e}",
            opts.hungarian_trials
        ),
    )
}

fn lid_round_trip() -> CheckResult {
    let mut bad = Vec::new();
    for range in [
        DepthRange::default(),
        DepthRange {
            num_bins: 64,
            ..DepthRange::default()
        },
        DepthRange {
            d_min: 0.5,
            d_max: 10.0,
            num_bins: 7,
        },
    ] {
        let k = range.num_bins;
        for i in 1..=k {
            if range.lid_depth(i).and_then(|d| range.lid_bin(d)).ok() != Some(i) {
                bad.push(format!("K={k} bin {i}"));
            }
        }
        let widths: Vec<f64> = (0..k).map(|i| range.edge(i + 1) - range.edge(i)).collect();
        if widths.windows(2).any(|w| w[1] <= w[0]) {
            bad.push(format!("K={k} widths not increasing"));
        }
        if (range.edge(k) - range.d_max).abs() > 1e-9 * range.d_max {
            bad.push(format!("K={k} last edge {}", range.edge(k)));
        }
        for s in 0..1000 {
            let d = range.d_min + (range.d_max - range.d_min) * (s as f64 + 0.37) / 1000.0;
            if range.lid_bin(d).ok() != Some(oracle::lid_bin_scan(d, &range)) {
                bad.push(format!("K={k} depth {d}"));
            }
        }
    }
    result(
        "lid round trip and monotone widths",
        bad.is_empty(),
        if bad.is_empty() {
            "K in {16, 64, 7}".into()
        } else {
            bad.join("; ")
        },
    )
}

/// Random scored predictions around random ground truth, over 1..=3 scenes.
pub fn random_prediction_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Box3D>>) {
    let scenes = rng.gen_range(1..=3);
    let mut preds = Vec::with_capacity(scenes);
    let mut gts = Vec::with_capacity(scenes);
    for _ in 0..scenes {
        let n_gt = rng.gen_range(0..=6);
        let gt: Vec<Box3D> = (0..n_gt)
            .map(|_| {
                let c = [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), -1.0];
                Box3D::new(
                    c,
                    [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.0), 1.7],
                    rng.gen_range(-3.1..3.1),
                    rng.gen_range(0..2),
                )
                .expect("valid box")
            })
            .collect();
        let mut p = Vec::new();
        for g in &gt {
            for _ in 0..rng.gen_range(0..=2) {
                let spread = [0.1, 0.7, 1.5, 3.0, 6.0][rng.gen_range(0..5)];
                let mut b = *g;
                b.x += rng.gen_range(-spread..=spread);
                b.y += rng.gen_range(-spread..=spread);
                b.theta = rng.gen_range(-3.1..3.1);
                if rng.gen_bool(0.1) {
                    b.class_id = 1 - b.class_id;
                }
                p.push(b);
            }
        }
        for _ in 0..rng.gen_range(0..=4) {
            let c = [rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), -1.0];
            p.push(Box3D::new(c, [1.0; 3], 0.0, rng.gen_range(0..2)).expect("valid box"));
        }
        preds.push(
            p.into_iter()
                .map(|b| {
                    // coarse scores so that ties occur
                    let score = (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0;
                    Detection {
                        box3d: b,
                        score,
                        class_probs: vec![score],
                    }
                })
                .collect(),
        );
        gts.push(gt);
    }
    (preds, gts)
}

fn ap_oracle(opts: &SelfCheckOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xa9);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    // constructed: 5 predictions, 3 ground truths, one far miss and one duplicate
    let g = |x: f64, y: f64| Box3D::new([x, y, -1.0], [1.0; 3], 0.0, 0).expect("valid box");
    let d = |x: f64, y: f64, s: f64| Detection {
        box3d: g(x, y),
        score: s,
        class_probs: vec![s],
    };
    let gts = vec![vec![g(0.0, 0.0), g(5.0, 0.0), g(0.0, 8.0)]];
    let preds = vec![vec![
        d(0.3, 0.0, 0.9),
        d(0.2, 0.1, 0.8),
        d(5.0, 1.5, 0.7),
        d(20.0, 0.0, 0.6),
        d(0.0, 8.4, 0.5),
    ]];
    let mut cases = vec![(preds, gts)];
    for _ in 0..opts.ap_cases {
        cases.push(random_prediction_case(&mut rng));
    }
    for (preds, gts) in &cases {
        for class_id in 0..2 {
            for &t in &DEFAULT_THRESHOLDS {
                let got = ap_at_threshold(preds, gts, class_id, t, ApMode::Clipped).ap;
                let want = oracle::ap_matcher(preds, gts, class_id, t);
                worst = worst.max((got - want).abs());
                compared += 1;
            }
        }
    }
    Ok(result(
        "ap vs matcher oracle",
        worst < 1e-9,
        format!("{compared} (case, class, threshold) triples, max diff {worst:.2e}"),
    ))
}

fn ray_duplicate_oracle(opts: &SelfCheckOptions) -> CheckResult {
    let name = "ray duplicates vs double loop";
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a);
    let params = RayDuplicateParams::default();
    let cfg = SceneConfig::default();
    let mut total = 0;
    for i in 0..50 {
        let scene = match generate_scene(opts.seed * 7919 + i, &cfg) {
            Ok(s) => s,
            Err(e) => return result(name, false, format!("error: {e}")),
        };
        let mut preds = Vec::new();
        for b in &scene.boxes {
            let c = scene.cameras[rng.gen_range(0..scene.cameras.len())].center();
            let f = [1.0, 1.0, 0.9, 1.3, 0.6][rng.gen_range(0..5)] + rng.gen_range(-0.005..0.005);
            let mut p = *b;
            p.x = c[0] + (b.x - c[0]) * f;
            p.y = c[1] + (b.y - c[1]) * f;
            p.z = c[2] + (b.z - c[2]) * f;
            preds.push(Detection {
                box3d: p,
                score: rng.gen_range(0.0..1.0),
                class_probs: vec![],
            });
        }
        let fast = ray_duplicate_count(&preds, &scene.boxes, &scene.cameras, &params);
        let slow = oracle::ray_duplicates_double_loop(
            &preds,
            &scene.boxes,
            &scene.cameras,
            params.score_min,
            params.angle_tol_deg,
            params.depth_tol,
            params.tp_threshold,
        );
        if fast != slow {
            return result(name, false, format!("scene {i}: {fast} vs {slow}"));
        }
        total += fast;
    }
    result(name, true, format!("50 scenes, {total} duplicates counted"))
}

/// Runs the suite and times it.
pub fn run_timed(opts: &SelfCheckOptions) -> (Vec<CheckResult>, std::time::Duration) {
    let t = Instant::now();
    let r = run(opts);
    (r, t.elapsed())
}
