//! Parameterised building blocks on top of [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x · W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(vec![in_dim, out_dim], bound, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `q: [Lq, C]`, `k, v: [Lk, C]` -> `[Lq, C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let (lq, lk) = (g.shape(q)[0], g.shape(k)[0]);
        let (h, d) = (self.heads, self.dim / self.heads);
        let qp = self.query.forward(g, store, q)?;
        let kp = self.key.forward(g, store, k)?;
        let vp = self.value.forward(g, store, v)?;
        let qh = g.reshape(qp, &[lq, h, d])?;
        let qh = g.permute(qh, &[1, 0, 2])?;
        let kh = g.reshape(kp, &[lk, h, d])?;
        let kh = g.permute(kh, &[1, 2, 0])?;
        let vh = g.reshape(vp, &[lk, h, d])?;
        let vh = g.permute(vh, &[1, 0, 2])?;
        let scores = g.matmul(qh, kh)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, vh)?;
        let out = g.permute(out, &[1, 0, 2])?;
        let out = g.reshape(out, &[lq, self.dim])?;
        self.output.forward(g, store, out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
