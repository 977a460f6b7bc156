use crossdtr_tensor::nn::{LayerNorm, Linear, MultiHeadAttention};
use crossdtr_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Square convolution with a per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        size: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // He-uniform: keeps activation scale through the GELU stack
        let bound = (6.0 / (size * size * in_ch) as f64).sqrt();
        Ok(Self {
            kernel: store.add(
                format!("{name}.kernel"),
                Tensor::uniform(vec![out_ch, in_ch, size, size], bound, rng),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]))?,
            stride,
            padding: size / 2,
            out_channels: out_ch,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let y = g.conv2d(x, k, self.stride, self.padding)?;
        let b = g.param(store, self.bias);
        let b = g.reshape(b, &[1, self.out_channels, 1, 1])?;
        Ok(g.add(y, b)?)
    }
}

/// `Linear -> GELU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        Ok(self.fc2.forward(g, store, h)?)
    }
}

/// Pre-norm attention sub-layer: `x + Attn(LN(x) + q_pos, k, v)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    /// Cross attention over fixed keys and values.
    pub fn cross(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        q_pos: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let q = g.add(h, q_pos)?;
        let out = self.attn.forward(g, store, q, k, v)?;
        Ok(g.add(x, out)?)
    }

    /// Self attention; the positional code goes on queries and keys only.
    pub fn self_attend(&self, g: &mut Graph, store: &ParamStore, x: Var, pos: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let qk = g.add(h, pos)?;
        let out = self.attn.forward(g, store, qk, qk, h)?;
        Ok(g.add(x, out)?)
    }
}

/// Pre-norm feed-forward sub-layer: `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }
}
