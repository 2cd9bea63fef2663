//! Transformer building blocks shared by the encoders and the decoder.
//!
//! Layers only hold [`ParamId`]s; the values live in the model's
//! [`ParamStore`] and are bound into a [`Graph`] on every forward pass.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x · W + b`, `W: [in×out]`, initialized uniform in
/// `±1/sqrt(in)`. The bias is optional.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[input, output], bound, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::uniform(&[output], bound, rng))?;
        Ok(Self {
            w,
            b: Some(b),
            input,
            output,
        })
    }

    pub fn without_bias<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[input, output], bound, rng))?;
        Ok(Self {
            w,
            b: None,
            input,
            output,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: NodeId) -> Result<NodeId> {
        let w = g.param(s, self.w);
        match self.b {
            Some(b) => {
                let b = g.param(s, b);
                g.linear(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }

    pub fn num_params(&self) -> usize {
        self.input * self.output + if self.b.is_some() { self.output } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[dim], F::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(s, self.gain);
        let bias = g.param(s, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
/// The key projection has no bias: it would add the same amount to every
/// logit of a query row, which the softmax removes.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::without_bias(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Attention of `x` over `context` (self-attention when they coincide).
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: NodeId,
        context: NodeId,
        bias: Option<NodeId>,
        mask: Option<&Tensor<F>>,
    ) -> Result<NodeId> {
        let q = self.q.forward(g, s, x)?;
        let k = self.k.forward(g, s, context)?;
        let v = self.v.forward(g, s, context)?;
        let a = g.attention(q, k, v, self.heads, bias, mask)?;
        self.o.forward(g, s, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, s, x)?;
        let h = g.gelu(h);
        self.down.forward(g, s, h)
    }
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, dim * ff_mult, rng)?,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: NodeId,
        bias: Option<NodeId>,
        mask: Option<&Tensor<F>>,
    ) -> Result<NodeId> {
        let h = self.ln_attn.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, bias, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, s, x)?;
        let f = self.ff.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention to the
/// encoder memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, dim * ff_mult, rng)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        s: &ParamStore<F>,
        x: NodeId,
        memory: NodeId,
        causal: &Tensor<F>,
        memory_mask: Option<&Tensor<F>>,
    ) -> Result<NodeId> {
        let h = self.ln_self.forward(g, s, x)?;
        let a = self.self_attn.forward(g, s, h, h, None, Some(causal))?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, s, x)?;
        let c = self.cross_attn.forward(g, s, h, memory, None, memory_mask)?;
        let x = g.add(x, c)?;
        let h = self.ln_ff.forward(g, s, x)?;
        let f = self.ff.forward(g, s, h)?;
        g.add(x, f)
    }
}

/// Rows `0..len` of a positional table as a `[len×D]` node.
pub fn positions<F: Real>(g: &mut Graph<F>, s: &ParamStore<F>, table: ParamId, len: usize) -> Result<NodeId> {
    let t = g.param(s, table);
    let ids: Vec<usize> = (0..len).collect();
    g.embedding(t, &ids)
}

/// Row `index` of a table as a `[D]` vector node.
pub fn table_row<F: Real>(g: &mut Graph<F>, s: &ParamStore<F>, table: ParamId, index: usize) -> Result<NodeId> {
    let t = g.param(s, table);
    let r = g.embedding(t, &[index])?;
    let d = g.shape(r)[1];
    g.reshape(r, &[d])
}
