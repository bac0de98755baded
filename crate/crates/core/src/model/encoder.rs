use super::attention::{AttentionKind, MultiHeadAttention};
use super::init::ParamSource;
use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Gain and bias of a layer normalization.
#[derive(Clone, Debug)]
pub struct Norm {
    gain: ParamId,
    bias: ParamId,
    eps: f64,
}

impl Norm {
    pub(crate) fn build(src: &mut ParamSource<'_>, prefix: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: src.param(&format!("{prefix}.gain"), |_| Tensor::filled(1, d, 1.0))?,
            bias: src.param(&format!("{prefix}.bias"), |_| Tensor::zeros(1, d))?,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// One `z + Norm(NA(z))` block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub(crate) fn build(
        src: &mut ParamSource<'_>,
        layers: usize,
        d_model: usize,
        heads: usize,
        landmarks: usize,
        pinv_iters: usize,
        eps: f64,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                let p = format!("enc.{l}");
                Ok(EncoderLayer {
                    attention: MultiHeadAttention::build(
                        src,
                        &format!("{p}.attn"),
                        d_model,
                        heads,
                        landmarks,
                        pinv_iters,
                    )?,
                    norm: Norm::build(src, &format!("{p}.norm"), d_model, eps)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let mut x = z;
        for layer in &self.layers {
            let a = layer
                .attention
                .forward(g, store, x, x, AttentionKind::Nystrom)?;
            let n = layer.norm.forward(g, store, a);
            x = g.add(x, n);
        }
        Ok(x)
    }
}
