use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossdtr_core::bench::metrics::{ApMode, MetricReport, RayDuplicateParams, DEFAULT_THRESHOLDS};
use crossdtr_core::bench::scene::{generate_scene, scene_id, Scene, SceneConfig};
use crossdtr_core::depthmap::{build_sparse_depth_maps, encode_pgm, DepthRange};
use crossdtr_core::geometry::Box3D;
use crossdtr_core::network::{Detection, DetectionSet};
use crossdtr_core::selfcheck::{self, SelfCheckOptions};
use crossdtr_core::train::{
    evaluate_predictions, load_checkpoint, load_scene_dir, predict, train, train_split, Ablation,
    RunConfig, SceneData, SEED_ENV,
};
use crossdtr_core::Error;
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_SELFCHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "crossdtr",
    version,
    about = "Depth-guided multi-camera 3D detection at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene JSON files with seeds seed..seed+count-1.
    GenScenes(GenScenes),
    /// Write one sparse depth map (binary PGM) per scene and camera.
    GenDepth(GenDepth),
    /// Train a model; writes the run config, log and checkpoints to the output directory.
    Train(Train),
    /// Evaluate a checkpoint, or stored predictions, on a directory of scenes.
    Eval(Eval),
    /// Run the oracle suites; exits 3 if any check fails.
    Selfcheck(Selfcheck),
}

#[derive(Args)]
struct GenScenes {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Scene generator settings (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDepth {
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DepthRange::default().num_bins)]
    bins: usize,
    #[arg(long, default_value_t = DepthRange::default().d_min)]
    dmin: f64,
    #[arg(long, default_value_t = DepthRange::default().d_max)]
    dmax: f64,
    /// Image pixels per depth-map pixel.
    #[arg(long, default_value_t = 16)]
    stride: usize,
}

#[derive(Args)]
struct Train {
    /// Run configuration (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides CROSSDTR_SEED and the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation preset: none, de or de+ddn.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha_class: Option<f64>,
    #[arg(long)]
    alpha_reg: Option<f64>,
    #[arg(long)]
    alpha_ddn: Option<f64>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(
        long,
        required_unless_present = "predictions",
        conflicts_with = "predictions"
    )]
    checkpoint: Option<PathBuf>,
    /// Directory of `<scene_id>.json` prediction files instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    thresholds: Vec<f64>,
    /// Report directory (`report.json`, `report_pr.csv`).
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Plain area under the PR curve instead of the clipped nuScenes form.
    #[arg(long)]
    plain_ap: bool,
}

#[derive(Args)]
struct Selfcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Stored detections of one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionFile {
    scene_id: String,
    detections: Vec<StoredDetection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredDetection {
    #[serde(rename = "box")]
    box3d: Box3D,
    score: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::GenDepth(a) => gen_depth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selfcheck(a) => return cmd_selfcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn create_dir(dir: &Path) -> crossdtr_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_scenes(a: GenScenes) -> crossdtr_core::Result<()> {
    let cfg: SceneConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SceneConfig::default(),
    };
    cfg.validate()?;
    create_dir(&a.out)?;
    for seed in a.seed..a.seed + a.count as u64 {
        let scene = generate_scene(seed, &cfg)?;
        scene.save(&a.out.join(format!("{}.json", scene_id(seed))))?;
    }
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn gen_depth(a: GenDepth) -> crossdtr_core::Result<()> {
    let range = DepthRange::new(a.dmin, a.dmax, a.bins).map_err(|e| Error::Usage(e.to_string()))?;
    if a.stride == 0 {
        return Err(Error::Usage("--stride must be >= 1".into()));
    }
    let scenes = load_scene_dir(&a.scenes)?;
    create_dir(&a.out)?;
    let mut written = 0;
    for scene in &scenes {
        let (w, h) = scene.image_size();
        if w % a.stride != 0 || h % a.stride != 0 {
            return Err(Error::Usage(format!(
                "{}: image {w}x{h} is not divisible by stride {}",
                scene.scene_id, a.stride
            )));
        }
        let maps = build_sparse_depth_maps(
            &scene.boxes,
            &scene.cameras,
            &range,
            w / a.stride,
            h / a.stride,
            false,
        )?;
        for (m, map) in maps.iter().enumerate() {
            let path = a.out.join(format!("{}_cam{m}.pgm", scene.scene_id));
            std::fs::write(&path, encode_pgm(map, range.num_bins))
                .map_err(|e| Error::io(&path, e))?;
            written += 1;
        }
    }
    println!(
        "wrote {written} depth maps for {} scenes to {}",
        scenes.len(),
        a.out.display()
    );
    Ok(())
}

fn run_config(a: &Train) -> crossdtr_core::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{path}: {source}")),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(a.seed, env.as_deref())?;
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = &a.ablate {
        cfg.ablation = Some(Ablation::parse(s)?);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    cfg.apply_ablation();
    if let Some(v) = a.alpha_class {
        cfg.loss.alpha_class = v;
    }
    if let Some(v) = a.alpha_reg {
        cfg.loss.alpha_reg = v;
    }
    if let Some(v) = a.alpha_ddn {
        cfg.loss.alpha_ddn = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: Train) -> crossdtr_core::Result<()> {
    let cfg = run_config(&a)?;
    if a.print_config {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let data = train_split(&cfg)?;
    let out = train(&cfg, &data, Some(&cfg.out_dir))?;
    match out.log.last() {
        Some(l) => println!(
            "trained {} iterations: L_class {:.6} L_reg {:.6} L_ddn {:.6} L_total {:.6}",
            out.log.len(),
            l.class,
            l.reg,
            l.ddn,
            l.total
        ),
        None => println!("trained 0 iterations"),
    }
    println!("run directory: {}", cfg.out_dir.display());
    Ok(())
}

fn load_predictions(dir: &Path, scenes: &[Scene]) -> crossdtr_core::Result<Vec<DetectionSet>> {
    scenes
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.json", s.scene_id));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: PredictionFile =
                serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
            if file.scene_id != s.scene_id {
                return Err(Error::Data(format!(
                    "{}: scene_id {:?} does not match {:?}",
                    path.display(),
                    file.scene_id,
                    s.scene_id
                )));
            }
            file.detections
                .into_iter()
                .map(|d| {
                    d.box3d.validate()?;
                    Ok(Detection {
                        box3d: d.box3d,
                        score: d.score,
                        class_probs: Vec::new(),
                    })
                })
                .collect()
        })
        .collect()
}

fn cmd_eval(a: Eval) -> crossdtr_core::Result<()> {
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::Usage(format!(
            "invalid --thresholds {:?}",
            a.thresholds
        )));
    }
    let scenes = load_scene_dir(&a.scenes)?;
    let preds = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let model = load_checkpoint(ckpt)?;
            let data = scenes
                .iter()
                .map(|s| SceneData::prepare(s.clone(), &model.config))
                .collect::<crossdtr_core::Result<Vec<_>>>()?;
            predict(&model, &data)?
        }
        (None, Some(dir)) => load_predictions(dir, &scenes)?,
        (None, None) => return Err(Error::Usage("need --checkpoint or --predictions".into())),
    };
    let refs: Vec<&Scene> = scenes.iter().collect();
    let mode = if a.plain_ap {
        ApMode::Plain
    } else {
        ApMode::Clipped
    };
    let report = evaluate_predictions(
        &preds,
        &refs,
        &a.thresholds,
        mode,
        &RayDuplicateParams::default(),
    );
    report.save(&a.out, "report")?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &MetricReport) {
    for c in &r.classes {
        let aps: Vec<String> =
            c.ap.iter()
                .map(|(t, ap)| format!("AP@{t}={ap:.4}"))
                .collect();
        let flag = if c.no_gt { " (no ground truth)" } else { "" };
        println!("{}: {}{flag}", c.name, aps.join(" "));
    }
    println!(
        "mAP {:.4}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  ray duplicates {}  ({} scenes)",
        r.map, r.mate, r.mase, r.maoe, r.ray_duplicates, r.scenes
    );
}

fn cmd_selfcheck(a: Selfcheck) -> ExitCode {
    let opts = SelfCheckOptions {
        seed: a.seed,
        ..SelfCheckOptions::default()
    };
    let (results, elapsed) = selfcheck::run_timed(&opts);
    print!("{}", selfcheck::summary(&results));
    println!("elapsed {:.1}s", elapsed.as_secs_f64());
    if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_SELFCHECK)
    }
}
