//! Reusable layers on top of the autodiff graph: linear maps, layer norm
//! with affine terms, multi-head attention and transformer-style blocks.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::mat::Mat;
use crate::rng::Prng;

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: usize,
    pub b: usize,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, d_in: usize, d_out: usize) -> Self {
        LinearLayer {
            w: store.add_glorot(&format!("{name}.w"), d_in, d_out, rng),
            b: store.add_zeros(&format!("{name}.b"), 1, d_out),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormLayer {
            gain: store.add(&format!("{name}.gain"), Mat::from_vec(1, dim, vec![1.0; dim])),
            bias: store.add_zeros(&format!("{name}.bias"), 1, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let normed = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let scaled = g.mul_row(normed, gain);
        g.add_row(scaled, bias)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, d_model: usize, heads: usize) -> Self {
        assert_eq!(d_model % heads, 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: LinearLayer::new(store, rng, &format!("{name}.wq"), d_model, d_model),
            wk: LinearLayer::new(store, rng, &format!("{name}.wk"), d_model, d_model),
            wv: LinearLayer::new(store, rng, &format!("{name}.wv"), d_model, d_model),
            wo: LinearLayer::new(store, rng, &format!("{name}.wo"), d_model, d_model),
            heads,
            d_model,
        }
    }

    /// Attention of `q_in` over `kv_in`; optional additive score mask.
    pub fn apply(&self, g: &mut Graph, q_in: NodeId, kv_in: NodeId, mask: Option<&Mat>) -> NodeId {
        let q = self.wq.apply(g, q_in);
        let k = self.wk.apply(g, kv_in);
        let v = self.wv.apply(g, kv_in);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                let mnode = g.input(m.clone());
                scores = g.add(scores, mnode);
            }
            let attn = g.softmax(scores);
            contexts.push(g.matmul(attn, vh));
        }
        let ctx = g.concat_cols(&contexts);
        self.wo.apply(g, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lift: LinearLayer,
    pub drop: LinearLayer,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, d_model: usize, d_hidden: usize) -> Self {
        FeedForward {
            lift: LinearLayer::new(store, rng, &format!("{name}.lift"), d_model, d_hidden),
            drop: LinearLayer::new(store, rng, &format!("{name}.drop"), d_hidden, d_model),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.lift.apply(g, x);
        let h = g.gelu(h);
        self.drop.apply(g, h)
    }
}

/// Pre-LN self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNormLayer,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormLayer,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, d_model: usize, heads: usize, d_ff: usize) -> Self {
        EncoderBlock {
            ln1: LayerNormLayer::new(store, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, heads),
            ln2: LayerNormLayer::new(store, &format!("{name}.ln2"), d_model),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let normed = self.ln1.apply(g, x);
        let attended = self.attn.apply(g, normed, normed, None);
        let x = g.add(x, attended);
        let normed = self.ln2.apply(g, x);
        let ff = self.ff.apply(g, normed);
        g.add(x, ff)
    }
}

/// Pre-LN decoder block: causal self-attention, cross-attention, FFN.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNormLayer,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNormLayer,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNormLayer,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Prng, name: &str, d_model: usize, heads: usize, d_ff: usize) -> Self {
        DecoderBlock {
            ln1: LayerNormLayer::new(store, &format!("{name}.ln1"), d_model),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d_model, heads),
            ln2: LayerNormLayer::new(store, &format!("{name}.ln2"), d_model),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d_model, heads),
            ln3: LayerNormLayer::new(store, &format!("{name}.ln3"), d_model),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: NodeId, memory: NodeId, causal: &Mat) -> NodeId {
        let normed = self.ln1.apply(g, x);
        let attended = self.self_attn.apply(g, normed, normed, Some(causal));
        let x = g.add(x, attended);
        let normed = self.ln2.apply(g, x);
        let crossed = self.cross_attn.apply(g, normed, memory, None);
        let x = g.add(x, crossed);
        let normed = self.ln3.apply(g, x);
        let ff = self.ff.apply(g, normed);
        g.add(x, ff)
    }
}

/// Sinusoidal positional encoding, T x d.
pub fn positional_encoding(t_len: usize, d_model: usize) -> Mat {
    let mut pe = Mat::zeros(t_len, d_model);
    for t in 0..t_len {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.data[t * d_model + 2 * i] = (t as f64 * rate).sin();
            pe.data[t * d_model + 2 * i + 1] = (t as f64 * rate).cos();
        }
    }
    pe
}

/// Upper-triangular -1e30 mask blocking attention to future steps.
pub fn causal_mask(t_len: usize) -> Mat {
    let mut m = Mat::zeros(t_len, t_len);
    for r in 0..t_len {
        for c in r + 1..t_len {
            m.data[r * t_len + c] = -1e30;
        }
    }
    m
}
