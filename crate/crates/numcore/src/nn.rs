//! Layers built on the tape: affine maps, strided 1-D convolutions, layer
//! normalisation, embeddings and pre-norm transformer blocks.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal_embedding, xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive attention mask value for blocked positions.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `x: [..., in_dim] -> [..., out_dim]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, kernel * in_ch, out_ch),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            w,
            b,
            kernel,
            stride,
            pad,
            in_ch,
            out_ch,
        }
    }

    /// `x: [B, T, in_ch] -> [B, T', out_ch]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, self.kernel, self.stride, self.pad)
    }

    pub fn out_len(&self, t: usize) -> usize {
        if t + 2 * self.pad < self.kernel {
            return 0;
        }
        (t + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        rows: usize,
        dim: usize,
    ) -> Self {
        let table = store.add(format!("{name}.table"), normal_embedding(rng, rows, dim));
        Self { table, rows, dim }
    }

    /// Looks up `ids`, returning `[ids.len(), dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.table);
        g.embedding(t, ids)
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let k = if j < half { j } else { j - half };
        let rate = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let angle = pos as f64 * rate;
        if j < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Additive mask `[B, Tq, Tk]` blocking keys at or beyond each sequence's length.
pub fn padding_mask(key_lens: &[usize], tq: usize, tk: usize) -> Tensor {
    let b = key_lens.len();
    Tensor::from_fn(&[b, tq, tk], |i| {
        let (bi, k) = (i / (tq * tk), i % tk);
        if k < key_lens[bi] {
            0.0
        } else {
            MASKED
        }
    })
}

/// Additive mask `[B, T, T]` that is both causal and padding-aware.
pub fn causal_mask(lens: &[usize], t: usize) -> Tensor {
    let b = lens.len();
    Tensor::from_fn(&[b, t, t], |i| {
        let (bi, q, k) = (i / (t * t), (i / t) % t, i % t);
        if k <= q && k < lens[bi].max(1) {
            0.0
        } else {
            MASKED
        }
    })
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Scaled dot-product attention. `query: [B, Tq, D]`, `memory: [B, Tk, D]`,
    /// `mask`: additive `[B, Tq, Tk]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: &Tensor,
    ) -> Result<Var> {
        let (sq, sm) = (g.shape(query).to_vec(), g.shape(memory).to_vec());
        if sq.len() != 3 || sm.len() != 3 || sq[0] != sm[0] || sq[2] != self.dim {
            return shape_err("attention", &sq, &sm);
        }
        let (b, tq, tk) = (sq[0], sq[1], sm[1]);
        if mask.shape() != [b, tq, tk] {
            return shape_err("attention mask", mask.shape(), &[b, tq, tk]);
        }
        let h = self.heads;
        let dh = self.dim / h;
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let q = g.split_heads(q, h)?;
        let k = g.split_heads(k, h)?;
        let v = g.split_heads(v, h)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let md = mask.data();
        let blk = tq * tk;
        let full = Tensor::from_fn(&[b * h, tq, tk], |i| {
            let bh = i / blk;
            md[(bh / h) * blk + i % blk]
        });
        let full = g.constant(full);
        let scores = g.add(scores, full)?;
        let probs = g.softmax(scores);
        let ctx = g.bmm(probs, v, false)?;
        let ctx = g.merge_heads(ctx, h)?;
        self.o.forward(g, store, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &Tensor) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Pre-norm transformer decoder block with causal self-attention and
/// cross-attention over encoder states.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), dim, heads),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.cross_attn"),
                dim,
                heads,
            ),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
        self_mask: &Tensor,
        cross_mask: &Tensor,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, store, x)?;
        let h = self.self_attn.forward(g, store, h, h, self_mask)?;
        let x = g.add(x, h)?;
        let h = self.ln_cross.forward(g, store, x)?;
        let h = self.cross_attn.forward(g, store, h, memory, cross_mask)?;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        g.add(x, h)
    }
}
