//! Multi-head attention: exact scaled dot-product and the Nyström
//! landmark approximation.

use log::debug;

use super::init::{xavier, ParamSource};
use crate::error::{contract, Result};
use crate::numerics::{pinv_graph, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Which attention kernel a layer evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Exact { causal: bool },
    /// Nyström with the layer's landmark count; exact attention is used when
    /// the sequence is no longer than the landmark count.
    Nystrom,
    /// Nyström with an explicit landmark count and no exact fallback.
    NystromForced(usize),
}

/// Single-head `softmax(q k^T / sqrt(d)) v`.
pub fn exact_head(g: &mut Graph, q: Var, k: Var, v: Var, causal: bool) -> Var {
    let d = g.shape(q)[1];
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let p = if causal {
        g.softmax_rows_causal(scores)
    } else {
        g.softmax_rows(scores)
    };
    g.matmul(p, v)
}

/// `m x n` matrix averaging `n` rows into `m` contiguous segments; the first
/// `n % m` segments take one extra row.
pub fn segment_means(n: usize, m: usize) -> Tensor {
    let mut p = Tensor::zeros(m, n);
    let (base, extra) = (n / m, n % m);
    let mut start = 0;
    for s in 0..m {
        let len = base + usize::from(s < extra);
        for c in start..start + len {
            p.set(s, c, 1.0 / len as f64);
        }
        start += len;
    }
    p
}

/// Single-head Nyström approximation
/// `softmax(q k~^T) pinv(softmax(q~ k~^T)) softmax(q~ k^T) v` with segment-mean
/// landmarks `q~`, `k~`.
pub fn nystrom_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    landmarks: usize,
    pinv_iters: usize,
) -> Result<Var> {
    let [n, d] = g.shape(q);
    if landmarks == 0 {
        return contract("Nyström attention needs at least one landmark");
    }
    let m = if landmarks > n {
        debug!("landmark count {landmarks} exceeds sequence length {n}; clamping");
        n
    } else {
        landmarks
    };
    let scale = 1.0 / (d as f64).sqrt();
    let p = g.constant(segment_means(n, m));
    let q_l = g.matmul(p, q);
    let k_l = g.matmul(p, k);
    let f = g.matmul_nt(q, k_l);
    let f = g.scale(f, scale);
    let f = g.softmax_rows(f);
    let a = g.matmul_nt(q_l, k_l);
    let a = g.scale(a, scale);
    let a = g.softmax_rows(a);
    let b = g.matmul_nt(q_l, k);
    let b = g.scale(b, scale);
    let b = g.softmax_rows(b);
    let z = pinv_graph(g, a, pinv_iters)?;
    let bv = g.matmul(b, v);
    let zbv = g.matmul(z, bv);
    Ok(g.matmul(f, zbv))
}

/// Exact single-head attention on plain tensors.
pub fn exact_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let out = exact_head(&mut g, qv, kv, vv, causal);
    g.value(out).clone()
}

/// Nyström single-head attention on plain tensors.
pub fn nystrom_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    landmarks: usize,
    pinv_iters: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let out = nystrom_head(&mut g, qv, kv, vv, landmarks, pinv_iters)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub d_model: usize,
    pub heads: usize,
    pub landmarks: usize,
    pub pinv_iters: usize,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl MultiHeadAttention {
    /// Registers fresh projections under `prefix`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
        landmarks: usize,
        pinv_iters: usize,
    ) -> Result<Self> {
        let mut src = ParamSource::Create { store, rng };
        Self::build(&mut src, prefix, d_model, heads, landmarks, pinv_iters)
    }

    pub(crate) fn build(
        src: &mut ParamSource<'_>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        landmarks: usize,
        pinv_iters: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return contract(format!("d_model {d_model} not divisible by {heads} heads"));
        }
        let mut w = |name: &str| src.param(&format!("{prefix}.{name}"), |r| xavier(r, d_model, d_model));
        let (wq, wk, wv, wo) = (w("wq")?, w("wk")?, w("wv")?, w("wo")?);
        let mut b = |name: &str| src.param(&format!("{prefix}.{name}"), |_| Tensor::zeros(1, d_model));
        let (bq, bk, bv, bo) = (b("bq")?, b("bk")?, b("bv")?, b("bo")?);
        Ok(Self {
            d_model,
            heads,
            landmarks,
            pinv_iters,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn affine(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Attention of `query_src` rows over `kv_src` rows; output has the
    /// query's row count and `d_model` columns.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query_src: Var,
        kv_src: Var,
        kind: AttentionKind,
    ) -> Result<Var> {
        let q = Self::affine(g, store, query_src, self.wq, self.bq);
        let k = Self::affine(g, store, kv_src, self.wk, self.bk);
        let v = Self::affine(g, store, kv_src, self.wv, self.bv);
        let n = g.shape(q)[0];
        let dh = self.d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let o = match kind {
                AttentionKind::Exact { causal } => exact_head(g, qh, kh, vh, causal),
                AttentionKind::Nystrom if n <= self.landmarks => {
                    exact_head(g, qh, kh, vh, false)
                }
                AttentionKind::Nystrom => {
                    nystrom_head(g, qh, kh, vh, self.landmarks, self.pinv_iters)?
                }
                AttentionKind::NystromForced(m) => {
                    nystrom_head(g, qh, kh, vh, m, self.pinv_iters)?
                }
            };
            outs.push(o);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        Ok(Self::affine(g, store, cat, self.wo, self.bo))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::new(3, 2, vec![0.1, 2.0, -1.0, 0.3, 5.0, 5.0]).unwrap();
        let k = Tensor::row_vector(vec![0.7, -0.2]);
        let v = Tensor::row_vector(vec![4.0, -3.0]);
        let out = exact_attention(&q, &k, &v, false);
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::row_vector(vec![1.0, -1.0]);
        let k = Tensor::new(3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let v = Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap();
        let out = exact_attention(&q, &k, &v, false);
        assert!((out.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((out.get(0, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn segments_distribute_remainder_to_leading() {
        let p = segment_means(7, 3);
        assert_eq!(p.row(0), &[1. / 3., 1. / 3., 1. / 3., 0., 0., 0., 0.]);
        assert_eq!(p.row(1), &[0., 0., 0., 0.5, 0.5, 0., 0.]);
        assert_eq!(p.row(2), &[0., 0., 0., 0., 0., 0.5, 0.5]);
    }

    #[test]
    fn nystrom_single_row() {
        let q = Tensor::row_vector(vec![0.3, 0.1]);
        let v = Tensor::row_vector(vec![2.0, -7.0]);
        let out = nystrom_attention(&q, &q, &v, 1, 24).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn landmarks_above_length_are_clamped() {
        let q = Tensor::new(2, 2, vec![0.3, 0.1, -0.2, 0.4]).unwrap();
        let v = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = nystrom_attention(&q, &q, &v, 9, 24).unwrap();
        let b = nystrom_attention(&q, &q, &v, 2, 24).unwrap();
        assert_eq!(a, b);
    }
}
