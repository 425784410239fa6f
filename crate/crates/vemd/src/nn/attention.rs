//! Transformer building blocks over 2-d (sequence, dim) tensors.

use ndarray::Array2;

use crate::graph::{Graph, TensorId};

use super::{Linear, LayerNorm, ParamStore, Scope};

/// Standard sinusoidal positional encoding table of shape (len, dim).
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "positional encoding needs an even dim");
    let mut pe = Array2::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, 2 * i]] = (pos as f64 * freq).sin();
            pe[[pos, 2 * i + 1]] = (pos as f64 * freq).cos();
        }
    }
    pe
}

struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new(scope: &mut Scope, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = scope.child(name);
        MultiHeadAttention {
            wq: Linear::new(&mut s, "wq", dim, dim, true),
            wk: Linear::new(&mut s, "wk", dim, dim, true),
            wv: Linear::new(&mut s, "wv", dim, dim, true),
            wo: Linear::new(&mut s, "wo", dim, dim, true),
            heads,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: TensorId,
        memory: TensorId,
    ) -> TensorId {
        let q = self.wq.forward(g, store, query);
        let k = self.wk.forward(g, store, memory);
        let v = self.wv.forward(g, store, memory);
        let a = g.attention(q, k, v, self.heads);
        self.wo.forward(g, store, a)
    }
}

/// Post-norm transformer encoder layer: self-attention then feed-forward.
pub struct TransformerEncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerEncoderLayer {
    pub fn new(scope: &mut Scope, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Self {
        let mut s = scope.child(name);
        TransformerEncoderLayer {
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads),
            ln1: LayerNorm::new(&mut s, "ln1", dim),
            ln2: LayerNorm::new(&mut s, "ln2", dim),
            ff1: Linear::new(&mut s, "ff1", dim, ff_dim, true),
            ff2: Linear::new(&mut s, "ff2", ff_dim, dim, true),
        }
    }

    /// x: (L, D) -> (L, D)
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let a = self.attn.forward(g, store, x, x);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, store, x);
        let f = self.ff1.forward(g, store, x);
        let f = g.relu(f);
        let f = self.ff2.forward(g, store, f);
        let x = g.add(x, f);
        self.ln2.forward(g, store, x)
    }
}

/// Post-norm transformer decoder layer: query self-attention, cross-attention
/// over the encoded memory, then feed-forward.
pub struct TransformerDecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerDecoderLayer {
    pub fn new(scope: &mut Scope, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Self {
        let mut s = scope.child(name);
        TransformerDecoderLayer {
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", dim, heads),
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", dim, heads),
            ln1: LayerNorm::new(&mut s, "ln1", dim),
            ln2: LayerNorm::new(&mut s, "ln2", dim),
            ln3: LayerNorm::new(&mut s, "ln3", dim),
            ff1: Linear::new(&mut s, "ff1", dim, ff_dim, true),
            ff2: Linear::new(&mut s, "ff2", ff_dim, dim, true),
        }
    }

    /// tgt: (Q, D), memory: (L, D) -> (Q, D)
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tgt: TensorId,
        memory: TensorId,
    ) -> TensorId {
        let a = self.self_attn.forward(g, store, tgt, tgt);
        let x = g.add(tgt, a);
        let x = self.ln1.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, x, memory);
        let x2 = g.add(x, c);
        let x2 = self.ln2.forward(g, store, x2);
        let f = self.ff1.forward(g, store, x2);
        let f = g.relu(f);
        let f = self.ff2.forward(g, store, f);
        let x3 = g.add(x2, f);
        self.ln3.forward(g, store, x3)
    }
}
