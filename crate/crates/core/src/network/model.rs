use crossdtr_tensor::nn::{LayerNorm, Linear};
use crossdtr_tensor::{sigmoid, Graph, ParamId, ParamStore, Precision, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraMatrix};
use crate::network::config::ModelConfig;
use crate::network::encoding::{
    anchor_freqs, decode_encoded, halton_anchors, inverse_sigmoid, position_code_2d, ray_samples,
    ANCHOR_FREQS, REG_DIM,
};
use crate::network::layers::{AttentionBlock, Conv, FeedForward, Mlp};

/// Class-logit bias so every query starts near probability 0.01.
const CLASS_PRIOR_BIAS: f64 = -4.595;

/// Multi-camera input of one scene.
#[derive(Debug, Clone)]
pub struct SceneInput {
    /// `[N, channels, H, W]`
    pub images: Tensor,
    pub cameras: Vec<CameraMatrix>,
}

#[derive(Debug, Clone, Copy)]
pub struct DepthOutputs {
    /// `[N, K + 1, H_d, W_d]`
    pub logits: Var,
    pub probs: Var,
    /// `[N, H_d * W_d, C]`
    pub embeddings: Var,
}

/// Head outputs of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[Q, num_classes]`
    pub logits: Var,
    /// `[Q, REG_DIM]` in regression space (center already in the unit cube).
    pub encoded: Var,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub layers: Vec<HeadOutput>,
    pub depth: DepthOutputs,
    /// `[N * H_d * W_d, C]`
    pub positional_3d: Var,
    pub feature_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub score: f64,
    pub class_probs: Vec<f64>,
}

pub type DetectionSet = Vec<Detection>;

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Option<AttentionBlock>,
    cross_depth: Option<AttentionBlock>,
    cross_view: AttentionBlock,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Parts {
    stem: Vec<Conv>,
    depth_convs: [Conv; 2],
    depth_cls: Conv,
    input_proj: Linear,
    view_norm: LayerNorm,
    encoder: Vec<(AttentionBlock, FeedForward)>,
    pe3d: Mlp,
    anchors: ParamId,
    query_content: ParamId,
    query_pos: Mlp,
    query_pos_view: Option<Mlp>,
    decoder: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    class_head: Mlp,
    reg_head: Mlp,
}

/// The detector together with its parameters.
#[derive(Debug, Clone)]
pub struct CrossDtr {
    pub config: ModelConfig,
    pub store: ParamStore,
    parts: Parts,
}

impl CrossDtr {
    pub fn new(config: ModelConfig, seed: u64, precision: Precision) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(precision);
        let parts = Parts::build(&config, &mut store, &mut rng)?;
        if config.freeze_anchors {
            store.set_trainable(parts.anchors, false);
        }
        Ok(Self {
            config,
            store,
            parts,
        })
    }

    pub fn precision(&self) -> Precision {
        self.store.precision()
    }

    /// Anchors in the unit cube, `[Q, 3]` row-major.
    pub fn anchors(&self) -> Vec<f64> {
        self.store
            .value(self.parts.anchors)
            .data()
            .iter()
            .map(|&v| sigmoid(v))
            .collect()
    }

    pub fn anchor_param(&self) -> ParamId {
        self.parts.anchors
    }

    /// Records the full forward pass on `g` using `store` (normally `self.store`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &SceneInput,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let p = &self.parts;
        let shape = input.images.shape().to_vec();
        if shape.len() != 4
            || shape[1] != cfg.image_channels
            || shape[0] != input.cameras.len()
            || shape[0] == 0
        {
            return Err(Error::Config(format!(
                "images must be [N={}, {}, H, W], got {:?}",
                input.cameras.len(),
                cfg.image_channels,
                shape
            )));
        }
        let (n, img_h, img_w) = (shape[0], shape[2], shape[3]);
        let (w_d, h_d) = cfg.feature_size(img_w, img_h)?;
        let l = w_d * h_d;
        let c = cfg.embed_dim;

        let mut x = g.constant(input.images.clone());
        for conv in &p.stem {
            let y = conv.forward(g, store, x)?;
            x = g.gelu(y);
        }
        let feats = x;

        let mut h = feats;
        for conv in &p.depth_convs {
            let y = conv.forward(g, store, h)?;
            h = g.gelu(y);
        }
        let depth_logits = p.depth_cls.forward(g, store, h)?;
        let depth_probs = g.softmax(depth_logits, 1)?;

        let flat = g.reshape(feats, &[n, c, l])?;
        let view = g.permute(flat, &[0, 2, 1])?;
        let pos2d = g.constant(position_code_2d(h_d, w_d, c));
        let e0 = p.input_proj.forward(g, store, view)?;
        let e0 = g.add(e0, pos2d)?;
        let mut per_view = Vec::with_capacity(n);
        for cam in 0..n {
            let e = g.narrow(e0, 0, cam, 1)?;
            let mut e = g.reshape(e, &[l, c])?;
            for (attn, ffn) in &p.encoder {
                e = attn.self_attend(g, store, e, pos2d)?;
                e = ffn.forward(g, store, e)?;
            }
            per_view.push(e);
        }
        let depth_kv = g.concat(&per_view, 0)?;
        let embeddings = g.reshape(depth_kv, &[n, l, c])?;

        let rays = g.constant(ray_samples(
            &input.cameras,
            w_d,
            h_d,
            &cfg.depth_range,
            &cfg.scene_bounds,
        )?);
        let pe3d = p.pe3d.forward(g, store, rays)?;
        let view_v = g.reshape(view, &[n * l, c])?;
        let view_v = p.view_norm.forward(g, store, view_v)?;
        let view_k = g.add(view_v, pe3d)?;

        let anchor_logits = g.param(store, p.anchors);
        let anchors = g.sigmoid(anchor_logits);
        let q = cfg.num_queries;
        let a3 = g.reshape(anchors, &[q, 3, 1])?;
        let freqs = g.constant(Tensor::new(vec![1, 1, ANCHOR_FREQS], anchor_freqs())?);
        let angles = g.mul(a3, freqs)?;
        let sin = g.sin(angles);
        let cos = g.cos(angles);
        let code = g.concat(&[sin, cos], 2)?;
        let code = g.reshape(code, &[q, 3 * 2 * ANCHOR_FREQS])?;
        let q_pos = p.query_pos.forward(g, store, code)?;
        let q_pos_view = match &p.query_pos_view {
            Some(mlp) => mlp.forward(g, store, code)?,
            None => q_pos,
        };

        let mut state = g.param(store, p.query_content);
        let mut layers = Vec::with_capacity(p.decoder.len());
        for layer in &p.decoder {
            if let Some(sa) = &layer.self_attn {
                state = sa.self_attend(g, store, state, q_pos)?;
            }
            if let Some(cd) = &layer.cross_depth {
                state = cd.cross(g, store, state, q_pos, depth_kv, depth_kv)?;
            }
            state = layer
                .cross_view
                .cross(g, store, state, q_pos_view, view_k, view_v)?;
            state = layer.ffn.forward(g, store, state)?;
            layers.push(self.head(g, store, state, anchor_logits)?);
        }

        Ok(ModelOutput {
            layers,
            depth: DepthOutputs {
                logits: depth_logits,
                probs: depth_probs,
                embeddings,
            },
            positional_3d: pe3d,
            feature_size: (w_d, h_d),
        })
    }

    fn head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: Var,
        anchor_logits: Var,
    ) -> Result<HeadOutput> {
        let p = &self.parts;
        let y = p.final_norm.forward(g, store, state)?;
        let logits = p.class_head.forward(g, store, y)?;
        let raw = p.reg_head.forward(g, store, y)?;
        let delta = g.narrow(raw, 1, 0, 3)?;
        let center = g.add(delta, anchor_logits)?;
        let center = g.sigmoid(center);
        let rest = g.narrow(raw, 1, 3, REG_DIM - 3)?;
        let encoded = g.concat(&[center, rest], 1)?;
        Ok(HeadOutput { logits, encoded })
    }

    /// Forward pass on a fresh tape, decoding every layer.
    pub fn detect(&self, input: &SceneInput) -> Result<Vec<DetectionSet>> {
        let mut g = Graph::new(self.precision());
        let out = self.forward(&mut g, &self.store, input)?;
        Ok(out.layers.iter().map(|h| self.decode(&g, h)).collect())
    }

    /// Detections of the last decoder layer.
    pub fn detect_final(&self, input: &SceneInput) -> Result<DetectionSet> {
        Ok(self.detect(input)?.pop().unwrap_or_default())
    }

    pub fn decode(&self, g: &Graph, head: &HeadOutput) -> DetectionSet {
        let k = self.config.num_classes;
        let logits = g.value(head.logits).data();
        let enc = g.value(head.encoded).data();
        logits
            .chunks_exact(k)
            .zip(enc.chunks_exact(REG_DIM))
            .map(|(lg, e)| {
                let class_probs: Vec<f64> = lg.iter().map(|&v| sigmoid(v)).collect();
                let (class_id, score) =
                    class_probs
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                            if p > best.1 {
                                (i, p)
                            } else {
                                best
                            }
                        });
                Detection {
                    box3d: decode_encoded(e, &self.config.scene_bounds, class_id),
                    score,
                    class_probs,
                }
            })
            .collect()
    }

    /// Zeroes every non-residual weight of decoder layer `index`.
    pub fn zero_decoder_layer(&mut self, index: usize) {
        let layer = &self.parts.decoder[index];
        let mut ids = Vec::new();
        for block in [&layer.self_attn, &layer.cross_depth].into_iter().flatten() {
            ids.extend(block.attn.params());
        }
        ids.extend(layer.cross_view.attn.params());
        ids.extend(layer.ffn.mlp.fc1.params());
        ids.extend(layer.ffn.mlp.fc2.params());
        for id in ids {
            self.store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }
}

impl Parts {
    fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.embed_dim;
        let hidden = cfg.hidden_dim;
        let k = cfg.depth_range.num_bins;

        let mut stem = Vec::new();
        let mut in_ch = cfg.image_channels;
        let channels = cfg.stem_channels();
        if channels.is_empty() {
            stem.push(Conv::new(store, "stem.0", in_ch, c, 3, 1, rng)?);
        }
        for (i, &out) in channels.iter().enumerate() {
            stem.push(Conv::new(
                store,
                &format!("stem.{i}"),
                in_ch,
                out,
                3,
                2,
                rng,
            )?);
            in_ch = out;
        }

        let depth_convs = [
            Conv::new(store, "depth.conv0", c, c, 3, 1, rng)?,
            Conv::new(store, "depth.conv1", c, c, 3, 1, rng)?,
        ];
        let depth_cls = Conv::new(store, "depth.cls", c, k + 1, 1, 1, rng)?;
        let input_proj = Linear::new(store, "encoder.input_proj", c, c, true, rng)?;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                Ok((
                    AttentionBlock::new(store, &format!("encoder.{i}.self"), c, cfg.heads, rng)?,
                    FeedForward::new(store, &format!("encoder.{i}.ffn"), c, hidden, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let pe3d = Mlp::new(store, "pe3d", 3 * k, hidden, c, rng)?;
        let view_norm = LayerNorm::new(store, "view.norm", c)?;

        let anchor_init: Vec<f64> = halton_anchors(cfg.num_queries)
            .into_iter()
            .flatten()
            .map(inverse_sigmoid)
            .collect();
        let anchors = store.add(
            "query.anchors",
            Tensor::new(vec![cfg.num_queries, 3], anchor_init)?,
        )?;
        let query_content = store.add(
            "query.content",
            Tensor::uniform(vec![cfg.num_queries, c], 0.1, rng),
        )?;
        let code_dim = 3 * 2 * ANCHOR_FREQS;
        let query_pos = Mlp::new(store, "query.pos", code_dim, hidden, c, rng)?;
        let query_pos_view = if cfg.share_query_pos {
            None
        } else {
            Some(Mlp::new(store, "query.pos_view", code_dim, hidden, c, rng)?)
        };

        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                Ok(DecoderLayer {
                    self_attn: if cfg.query_self_attention {
                        Some(AttentionBlock::new(
                            store,
                            &format!("{name}.self"),
                            c,
                            cfg.heads,
                            rng,
                        )?)
                    } else {
                        None
                    },
                    cross_depth: if cfg.cross_depth {
                        Some(AttentionBlock::new(
                            store,
                            &format!("{name}.cross_depth"),
                            c,
                            cfg.heads,
                            rng,
                        )?)
                    } else {
                        None
                    },
                    cross_view: AttentionBlock::new(
                        store,
                        &format!("{name}.cross_view"),
                        c,
                        cfg.heads,
                        rng,
                    )?,
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), c, hidden, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let final_norm = LayerNorm::new(store, "head.norm", c)?;
        let class_head = Mlp::new(store, "head.class", c, hidden, cfg.num_classes, rng)?;
        if let Some(b) = class_head.fc2.bias {
            let prior = store.precision().round(CLASS_PRIOR_BIAS);
            store
                .value_mut(b)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = prior);
        }
        let reg_head = Mlp::new(store, "head.reg", c, hidden, REG_DIM, rng)?;

        Ok(Self {
            stem,
            depth_convs,
            depth_cls,
            input_proj,
            view_norm,
            encoder,
            pe3d,
            anchors,
            query_content,
            query_pos,
            query_pos_view,
            decoder,
            final_norm,
            class_head,
            reg_head,
        })
    }
}
