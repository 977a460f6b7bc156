//! Run configuration, training loop, checkpoints and model evaluation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crossdtr_tensor::{
    checkpoint, AdamW, AdamWConfig, Graph, ParamStore, Precision, TensorError, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::{
    evaluate, ApMode, EvalScene, MetricReport, RayDuplicateParams, DEFAULT_THRESHOLDS,
};
use crate::bench::scene::{generate_scene, render_images, Scene, SceneConfig, CLASS_NAMES};
use crate::depthmap::{build_sparse_depth_maps, SparseDepthMap};
use crate::error::{Error, Result};
use crate::network::encoding::encode_box;
use crate::network::{CrossDtr, DetectionSet, ModelConfig, SceneInput};
use crate::objective::{ddn_loss, detection_loss, total_loss, FocalParams, LossWeights, Targets};

pub const CHECKPOINT_FILE: &str = "checkpoint.cdtr";
pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";
pub const SEED_ENV: &str = "CROSSDTR_SEED";

const SHUFFLE_STREAM: u64 = 0x0005_eed5_7a11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Linear warmup from 0 over this many iterations.
    pub warmup_iters: usize,
    /// Cosine decay to 0 over the run after warmup.
    pub cosine: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            grad_clip: 35.0,
            warmup_iters: 0,
            cosine: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    pub fn lr_at(&self, iter: usize, total: usize) -> f64 {
        if iter < self.warmup_iters {
            return self.lr * (iter + 1) as f64 / self.warmup_iters as f64;
        }
        if !self.cosine || total <= self.warmup_iters {
            return self.lr;
        }
        let t = (iter - self.warmup_iters) as f64 / (total - self.warmup_iters) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Structural ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// No cross-depth sub-layer, no depth supervision.
    #[serde(rename = "none")]
    Baseline,
    /// Cross-depth sub-layer, no depth supervision.
    #[serde(rename = "de")]
    DepthEmbedding,
    #[serde(rename = "de+ddn")]
    DepthEmbeddingDdn,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::Baseline,
        Ablation::DepthEmbedding,
        Ablation::DepthEmbeddingDdn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "none",
            Ablation::DepthEmbedding => "de",
            Ablation::DepthEmbeddingDdn => "de+ddn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown ablation {s:?} (expected none, de or de+ddn)"
                ))
            })
    }

    /// Sets the cross-depth switch and, without depth supervision, zeroes
    /// `alpha_ddn`. A nonzero `alpha_ddn` already in the config is kept for `de+ddn`.
    pub fn apply(self, cfg: &mut RunConfig) {
        cfg.model.cross_depth = self != Ablation::Baseline;
        if self != Ablation::DepthEmbeddingDdn {
            cfg.loss.alpha_ddn = 0.0;
        } else if cfg.loss.alpha_ddn == 0.0 {
            cfg.loss.alpha_ddn = LossWeights::default().alpha_ddn;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub focal: FocalParams,
    pub optimizer: OptimizerConfig,
    pub scene: SceneConfig,
    pub epochs: usize,
    /// Scenes per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Seeds parameter initialization and the epoch shuffle.
    pub seed: u64,
    /// First scene seed; training scenes use `data_seed..`, validation follows.
    pub data_seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Extra checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    /// Load training scenes from this directory of scene JSON files instead of generating them.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub ablation: Option<Ablation>,
    /// Also train on the mirror image of every training scene.
    pub augment_mirror: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            focal: FocalParams::default(),
            optimizer: OptimizerConfig::default(),
            scene: SceneConfig::default(),
            epochs: 10,
            batch_size: 1,
            seed: 0,
            data_seed: 0,
            train_scenes: 200,
            val_scenes: 50,
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/default"),
            train_dir: None,
            val_dir: None,
            ablation: None,
            augment_mirror: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serializes");
        s.push('\n');
        s
    }

    /// Seed precedence: explicit flag, then `CROSSDTR_SEED`, then the config file.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(v) = env {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    /// Applies the ablation preset, if any, in place.
    pub fn apply_ablation(&mut self) {
        if let Some(a) = self.ablation {
            a.apply(self);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.scene.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.model.num_classes != CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "model.num_classes = {} but the benchmark has {} classes",
                self.model.num_classes,
                CLASS_NAMES.len()
            )));
        }
        self.model
            .feature_size(self.scene.image_w, self.scene.image_h)?;
        Ok(())
    }

    pub fn iterations(&self, train_scenes: usize) -> usize {
        self.epochs * train_scenes.div_ceil(self.batch_size)
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_scenes as u64)
            .map(|i| self.data_seed + i)
            .collect()
    }

    pub fn val_seeds(&self) -> Vec<u64> {
        let base = self.data_seed + self.train_scenes as u64;
        (0..self.val_scenes as u64).map(|i| base + i).collect()
    }
}

/// Network inputs and targets of one scene, computed once.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub scene: Scene,
    pub input: SceneInput,
    pub targets: Targets,
    pub depth: Vec<SparseDepthMap>,
}

impl SceneData {
    pub fn prepare(scene: Scene, model: &ModelConfig) -> Result<Self> {
        let (w, h) = scene.image_size();
        let (w_d, h_d) = model.feature_size(w, h)?;
        let range = &model.depth_range;
        let depth = build_sparse_depth_maps(&scene.boxes, &scene.cameras, range, w_d, h_d, false)?;
        let targets = Targets {
            classes: scene.boxes.iter().map(|b| b.class_id).collect(),
            encoded: scene
                .boxes
                .iter()
                .map(|b| encode_box(b, &model.scene_bounds))
                .collect(),
        };
        let input = SceneInput {
            images: render_images(&scene, range),
            cameras: scene.cameras.clone(),
        };
        Ok(Self {
            scene,
            input,
            targets,
            depth,
        })
    }
}

pub fn generate_split(
    seeds: &[u64],
    scene: &SceneConfig,
    model: &ModelConfig,
) -> Result<Vec<SceneData>> {
    seeds
        .iter()
        .map(|&s| SceneData::prepare(generate_scene(s, scene)?, model))
        .collect()
}

/// Scene JSON files of a directory, in file-name order.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Scene::load(p)).collect()
}

fn split(cfg: &RunConfig, dir: &Option<PathBuf>, seeds: Vec<u64>) -> Result<Vec<SceneData>> {
    match dir {
        Some(d) => load_scene_dir(d)?
            .into_iter()
            .map(|s| SceneData::prepare(s, &cfg.model))
            .collect(),
        None => generate_split(&seeds, &cfg.scene, &cfg.model),
    }
}

pub fn train_split(cfg: &RunConfig) -> Result<Vec<SceneData>> {
    let mut data = split(cfg, &cfg.train_dir, cfg.train_seeds())?;
    if cfg.augment_mirror {
        let mirrored = data
            .iter()
            .map(|d| SceneData::prepare(d.scene.mirrored()?, &cfg.model))
            .collect::<Result<Vec<_>>>()?;
        data.extend(mirrored);
    }
    Ok(data)
}

pub fn val_split(cfg: &RunConfig) -> Result<Vec<SceneData>> {
    split(cfg, &cfg.val_dir, cfg.val_seeds())
}

/// Scalar losses of one step, averaged over the batch. Class and
/// regression terms are unweighted means over the supervised layers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub class: f64,
    pub reg: f64,
    pub ddn: f64,
    pub total: f64,
}

impl StepLosses {
    fn is_finite(&self) -> bool {
        [self.class, self.reg, self.ddn, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Builds the loss of one scene on `g`; returns the total and its parts.
pub fn scene_loss(
    g: &mut Graph,
    model: &CrossDtr,
    store: &ParamStore,
    data: &SceneData,
    loss: &LossWeights,
    focal: FocalParams,
) -> Result<(Var, StepLosses)> {
    let out = model.forward(g, store, &data.input)?;
    let supervised = if model.config.deep_supervision {
        &out.layers[..]
    } else {
        &out.layers[out.layers.len() - 1..]
    };
    let mut totals = Vec::with_capacity(supervised.len());
    let (mut class, mut reg) = (0.0, 0.0);
    for head in supervised {
        let l = detection_loss(g, head, &data.targets, loss, focal)?;
        class += g.item(l.class)?;
        reg += g.item(l.reg)?;
        totals.push(l.total);
    }
    let ddn = ddn_loss(g, out.depth.logits, &data.depth, focal)?;
    let total = total_loss(g, &totals, ddn, loss)?;
    let n = supervised.len() as f64;
    let parts = StepLosses {
        class: class / n,
        reg: reg / n,
        ddn: g.item(ddn)?,
        total: g.item(total)?,
    };
    Ok((total, parts))
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: CrossDtr,
    optimizer: AdamW,
    total_iters: usize,
    iter: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, total_iters: usize) -> Result<Self> {
        config.validate()?;
        let model = CrossDtr::new(config.model.clone(), config.seed, Precision::F32)?;
        let optimizer = AdamW::new(&model.store, config.optimizer.adamw());
        Ok(Self {
            config,
            model,
            optimizer,
            total_iters,
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// One optimizer step over `batch`. Non-finite losses abort before any
    /// parameter changes.
    pub fn step(&mut self, batch: &[&SceneData]) -> Result<StepLosses> {
        let mut sum = StepLosses::default();
        self.model.store.zero_grad();
        for data in batch {
            let mut g = Graph::new(self.model.precision());
            let (total, parts) = scene_loss(
                &mut g,
                &self.model,
                &self.model.store,
                data,
                &self.config.loss,
                self.config.focal,
            )?;
            if !parts.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iter,
                    seeds: batch.iter().map(|d| d.scene.seed).collect(),
                });
            }
            g.backward_into(total, &mut self.model.store)?;
            sum.class += parts.class;
            sum.reg += parts.reg;
            sum.ddn += parts.ddn;
            sum.total += parts.total;
        }
        let n = batch.len() as f64;
        self.model.store.scale_grads(1.0 / n);
        let clip = self.config.optimizer.grad_clip;
        if clip > 0.0 {
            let norm = self.model.store.grad_norm();
            if norm > clip {
                self.model.store.scale_grads(clip / norm);
            }
        }
        self.optimizer.config.lr = self.config.optimizer.lr_at(self.iter, self.total_iters);
        self.optimizer.step(&mut self.model.store);
        self.iter += 1;
        Ok(StepLosses {
            class: sum.class / n,
            reg: sum.reg / n,
            ddn: sum.ddn / n,
            total: sum.total / n,
        })
    }
}

pub struct TrainOutcome {
    pub model: CrossDtr,
    /// Per-iteration losses.
    pub log: Vec<StepLosses>,
}

pub const LOG_HEADER: &str = "iter,L_class,L_reg,L_ddn,L_total\n";

fn log_line(iter: usize, l: &StepLosses) -> String {
    format!("{iter},{},{},{},{}\n", l.class, l.reg, l.ddn, l.total)
}

pub fn log_csv(log: &[StepLosses]) -> String {
    let mut s = String::from(LOG_HEADER);
    for (i, l) in log.iter().enumerate() {
        let _ = write!(s, "{}", log_line(i, l));
    }
    s
}

/// Trains on `data`. With `out_dir`, writes the configs, the CSV log,
/// periodic and final checkpoints, and a dump on a non-finite loss.
pub fn train(cfg: &RunConfig, data: &[SceneData], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let total = cfg.iterations(data.len());
    let mut trainer = Trainer::new(cfg.clone(), total)?;
    let mut log_file = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(RUN_CONFIG_FILE), cfg.to_json().as_bytes())?;
        let path = dir.join(LOG_FILE);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(LOG_HEADER.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        log_file = Some((std::io::BufWriter::new(f), path));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(total);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneData> = chunk.iter().map(|&i| &data[i]).collect();
            let iter = trainer.iteration();
            let losses = match trainer.step(&batch) {
                Ok(l) => l,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = out_dir {
                        write_nan_dump(dir, iter, &batch, &trainer)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((f, path)) = log_file.as_mut() {
                f.write_all(log_line(iter, &losses).as_bytes())
                    .map_err(|e| Error::io(&*path, e))?;
            }
            log.push(losses);
            if let Some(dir) = out_dir {
                let done = trainer.iteration();
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
                    save_checkpoint(
                        &trainer.model,
                        &dir.join(format!("checkpoint_iter{done:06}.cdtr")),
                    )?;
                }
            }
        }
    }
    if let Some((mut f, path)) = log_file {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&trainer.model, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

fn write_nan_dump(
    dir: &Path,
    iteration: usize,
    batch: &[&SceneData],
    trainer: &Trainer,
) -> Result<()> {
    let scenes: Vec<serde_json::Value> = batch
        .iter()
        .map(|d| {
            let mut g = Graph::new(trainer.model.precision());
            let losses = scene_loss(&mut g, &trainer.model, &trainer.model.store, d, &trainer.config.loss, trainer.config.focal)
                .map(|(_, l)| format!("{l:?}"))
                .unwrap_or_else(|e| e.to_string());
            serde_json::json!({ "scene_id": d.scene.scene_id, "seed": d.scene.seed, "losses": losses })
        })
        .collect();
    let dump = serde_json::json!({
        "iteration": iteration,
        "run_seed": trainer.config.seed,
        "scenes": scenes,
    });
    let mut text = serde_json::to_string_pretty(&dump).expect("dump serializes");
    text.push('\n');
    write_file(&dir.join(NAN_DUMP_FILE), text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the parameters and, next to them, `model_config.json`.
pub fn save_checkpoint(model: &CrossDtr, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = checkpoint::encode(model.store.named_values())?;
    write_file(path, &bytes)?;
    let mut cfg = serde_json::to_string_pretty(&model.config).expect("model config serializes");
    cfg.push('\n');
    write_file(&model_config_path(path), cfg.as_bytes())
}

pub fn model_config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name(MODEL_CONFIG_FILE)
}

/// Loads a checkpoint with its sibling `model_config.json`. A format version
/// or a tensor set that does not fit the config is a version error.
pub fn load_checkpoint(path: &Path) -> Result<CrossDtr> {
    let cfg_path = model_config_path(path);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(&cfg_path, e))?;
    config.validate()?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = checkpoint::decode(&bytes).map_err(|e| match e {
        TensorError::Checkpoint(m) if m.contains("version") => {
            Error::Version(format!("{}: {m}", path.display()))
        }
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let mut model = CrossDtr::new(config, 0, Precision::F32)?;
    model.store.load_named(&tensors).map_err(|e| {
        Error::Version(format!(
            "{} does not match {}: {e}",
            path.display(),
            cfg_path.display()
        ))
    })?;
    Ok(model)
}

/// Final-layer detections per scene.
pub fn predict(model: &CrossDtr, scenes: &[SceneData]) -> Result<Vec<DetectionSet>> {
    scenes
        .iter()
        .map(|s| model.detect_final(&s.input))
        .collect()
}

pub fn evaluate_predictions(
    preds: &[DetectionSet],
    scenes: &[&Scene],
    thresholds: &[f64],
    mode: ApMode,
    ray: &RayDuplicateParams,
) -> MetricReport {
    let eval: Vec<EvalScene<'_>> = preds
        .iter()
        .zip(scenes)
        .map(|(p, s)| EvalScene {
            preds: p,
            gts: &s.boxes,
            cameras: &s.cameras,
        })
        .collect();
    evaluate(&eval, &CLASS_NAMES, thresholds, mode, ray)
}

pub fn evaluate_model(model: &CrossDtr, scenes: &[SceneData]) -> Result<MetricReport> {
    let preds = predict(model, scenes)?;
    let refs: Vec<&Scene> = scenes.iter().map(|s| &s.scene).collect();
    Ok(evaluate_predictions(
        &preds,
        &refs,
        &DEFAULT_THRESHOLDS,
        ApMode::default(),
        &RayDuplicateParams::default(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig {
            epochs: 1,
            train_scenes: 2,
            val_scenes: 1,
            ..RunConfig::default()
        };
        cfg.model.embed_dim = 16;
        cfg.model.hidden_dim = 16;
        cfg.model.num_queries = 8;
        cfg.model.decoder_layers = 1;
        cfg
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::default();
        cfg.resolve_seed(None, None).unwrap();
        assert_eq!(cfg.seed, 0);
        cfg.resolve_seed(None, Some("17")).unwrap();
        assert_eq!(cfg.seed, 17);
        cfg.resolve_seed(Some(3), Some("17")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(matches!(
            cfg.resolve_seed(None, Some("x")),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn ablation_presets() {
        for (a, depth, ddn) in [
            (Ablation::Baseline, false, 0.0),
            (Ablation::DepthEmbedding, true, 0.0),
            (Ablation::DepthEmbeddingDdn, true, 1.0),
        ] {
            let mut cfg = RunConfig {
                ablation: Some(a),
                ..RunConfig::default()
            };
            cfg.apply_ablation();
            assert_eq!((cfg.model.cross_depth, cfg.loss.alpha_ddn), (depth, ddn));
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("ddn").is_err());
    }

    #[test]
    fn config_json_round_trip_and_strict() {
        let cfg = RunConfig::default();
        assert_eq!(
            RunConfig::from_json(&cfg.to_json(), Path::new("x")).unwrap(),
            cfg
        );
        assert!(RunConfig::from_json("{\"epoch\": 3}", Path::new("x")).is_err());
        let partial = RunConfig::from_json("{\"epochs\": 3}", Path::new("x")).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.model, ModelConfig::default());
    }

    #[test]
    fn lr_schedule() {
        let o = OptimizerConfig {
            lr: 1.0,
            warmup_iters: 4,
            cosine: true,
            ..OptimizerConfig::default()
        };
        assert_eq!(o.lr_at(0, 14), 0.25);
        assert_eq!(o.lr_at(4, 14), 1.0);
        assert!((o.lr_at(9, 14) - 0.5).abs() < 1e-12);
        assert_eq!(OptimizerConfig::default().lr_at(100, 10), 2e-4);
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let mut cfg = tiny();
        cfg.epochs = 0;
        let data = train_split(&cfg).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        let init = CrossDtr::new(cfg.model.clone(), cfg.seed, Precision::F32).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(
            out.model.store.named_values().collect::<Vec<_>>(),
            init.store.named_values().collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let data = train_split(&cfg).unwrap();
        let out = train(&cfg, &data, Some(dir.path())).unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(
            back.store.named_values().collect::<Vec<_>>(),
            out.model.store.named_values().collect::<Vec<_>>()
        );
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log, log_csv(&out.log));
        assert_eq!(log.lines().count(), 3);

        let mut other = cfg.model.clone();
        other.embed_dim = 8;
        other.hidden_dim = 8;
        std::fs::write(
            model_config_path(&path),
            serde_json::to_string(&other).unwrap(),
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version(_))));
    }
}
