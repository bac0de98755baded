use super::attention::{AttentionKind, MultiHeadAttention};
use super::encoder::Norm;
use super::init::{xavier, ParamSource};
use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Position-wise `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub(crate) fn build(src: &mut ParamSource<'_>, prefix: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: src.param(&format!("{prefix}.w1"), |r| xavier(r, d, hidden))?,
            b1: src.param(&format!("{prefix}.b1"), |_| Tensor::zeros(1, hidden))?,
            w2: src.param(&format!("{prefix}.w2"), |r| xavier(r, hidden, d))?,
            b2: src.param(&format!("{prefix}.b2"), |_| Tensor::zeros(1, d))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }
}

/// Causal self-attention, cross-attention over the encoder memory, then FFN:
///
/// ```text
/// h'  = h + Norm(SelfAttn(h))
/// h'' = FFN(h' + Norm(CrossAttn(h', memory)))
/// ```
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: Norm,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: Norm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, memory: Var) -> Result<Var> {
        let s = self
            .self_attention
            .forward(g, store, h, h, AttentionKind::Exact { causal: true })?;
        let s = self.self_norm.forward(g, store, s);
        let h1 = g.add(h, s);
        let c = self
            .cross_attention
            .forward(g, store, h1, memory, AttentionKind::Exact { causal: false })?;
        let c = self.cross_norm.forward(g, store, c);
        let x = g.add(h1, c);
        Ok(self.ffn.forward(g, store, x))
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Label decoder: frozen word table, input projection, layers and a growable
/// output head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub d_model: usize,
    pub d_text: usize,
    words: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    pub layers: Vec<DecoderLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

pub(crate) struct DecoderShape {
    pub layers: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub pinv_iters: usize,
    pub eps: f64,
}

impl Decoder {
    pub(crate) fn build(src: &mut ParamSource<'_>, s: &DecoderShape) -> Result<Self> {
        let (d, dt) = (s.d_model, s.d_text);
        let words = src.param("dec.words", |_| Tensor::zeros(0, dt))?;
        let in_w = src.param("dec.in.w", |r| xavier(r, dt, d))?;
        let in_b = src.param("dec.in.b", |_| Tensor::zeros(1, d))?;
        let mut layers = Vec::with_capacity(s.layers);
        for l in 0..s.layers {
            let p = format!("dec.{l}");
            layers.push(DecoderLayer {
                self_attention: MultiHeadAttention::build(
                    src,
                    &format!("{p}.self"),
                    d,
                    s.heads,
                    0,
                    s.pinv_iters,
                )?,
                self_norm: Norm::build(src, &format!("{p}.self_norm"), d, s.eps)?,
                cross_attention: MultiHeadAttention::build(
                    src,
                    &format!("{p}.cross"),
                    d,
                    s.heads,
                    0,
                    s.pinv_iters,
                )?,
                cross_norm: Norm::build(src, &format!("{p}.cross_norm"), d, s.eps)?,
                ffn: FeedForward::build(src, &format!("{p}.ffn"), d, s.ffn_hidden)?,
            });
        }
        let head_w = src.param("dec.head.w", |_| Tensor::zeros(0, d))?;
        let head_b = src.param("dec.head.b", |_| Tensor::zeros(0, 1))?;
        Ok(Self {
            d_model: d,
            d_text: dt,
            words,
            in_w,
            in_b,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn word_table(&self) -> ParamId {
        self.words
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.value(self.head_w).rows()
    }

    /// Appends word-table rows and freshly initialized output-head rows.
    pub fn grow(&self, store: &mut ParamStore, embeddings: &Tensor, head_rows: &Tensor) {
        store.append_rows(self.words, embeddings);
        store.append_rows(self.head_w, head_rows);
        store.append_rows(self.head_b, &Tensor::zeros(head_rows.rows(), 1));
    }

    /// Hidden states `len x d_model` for a token prefix.
    pub fn hidden(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        prefix: &[usize],
    ) -> Result<Var> {
        let table = store.value(self.words);
        let rows: Vec<&[f64]> = prefix.iter().map(|&t| table.row(t)).collect();
        let emb = g.constant(Tensor::from_rows(&rows)?);
        let w = g.param(store, self.in_w);
        let b = g.param(store, self.in_b);
        let h = g.matmul(emb, w);
        let h = g.add_row(h, b);
        let pos = g.constant(sinusoidal_positions(prefix.len(), self.d_model));
        let mut h = g.add(h, pos);
        for layer in &self.layers {
            h = layer.forward(g, store, h, memory)?;
        }
        Ok(h)
    }

    /// Next-token logits `rows(h) x N_voc`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let l = g.matmul_nt(h, w);
        let bt = g.transpose(b);
        g.add_row(l, bt)
    }
}
