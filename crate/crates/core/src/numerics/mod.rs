//! Dense kernels, reverse-mode autodiff, the pseudo-inverse iteration and
//! the Adam optimizer.

mod adam;
pub mod graph;
mod params;
mod pinv;
mod tensor;

pub use adam::{AdamState, PAPER_LEARNING_RATE};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use pinv::{
    pinv_graph, pinv_newton_schulz, pinv_with_residuals, relative_residual, DEFAULT_PINV_ITERS,
};
pub use tensor::Tensor;

use crate::error::{contract, Result};

/// Row-wise softmax of a matrix.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if !m.all_finite() {
        return contract("softmax_rows on non-finite input");
    }
    Ok(graph::softmax_rows(m, false))
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return contract("layer_norm epsilon must be positive");
    }
    if gain.shape() != [1, x.cols()] || bias.shape() != [1, x.cols()] {
        return contract("layer_norm gain/bias must be 1 x d");
    }
    let mut g = Graph::new();
    let (xv, gv, bv) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layer_norm(xv, gv, bv, eps);
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_row_gives_bias() {
        let x = Tensor::row_vector(vec![3.0; 4]);
        let bias = Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4]);
        let y = layer_norm(&x, &Tensor::filled(1, 4, 1.0), &bias, 1e-5).unwrap();
        assert!(y.max_abs_diff(&bias) < 1e-4);
    }

    #[test]
    fn layer_norm_unit_variance_pair() {
        let x = Tensor::row_vector(vec![1.0, -1.0]);
        let y = layer_norm(&x, &Tensor::filled(1, 2, 1.0), &Tensor::zeros(1, 2), 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = Tensor::row_vector(vec![0.3, -1.0, 2.5]);
        let b = a.map(|v| v + 17.0);
        let (sa, sb) = (softmax_rows(&a).unwrap(), softmax_rows(&b).unwrap());
        assert!(sa.max_abs_diff(&sb) < 1e-15);
    }
}
