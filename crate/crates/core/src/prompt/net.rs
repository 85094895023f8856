//! Forward and backward passes of the prompt network.
//!
//! ```text
//! K = T·W_K, V = T·W_V
//! head h:  S_h = softmax(Q_h K_hᵀ / √(d_h/H)),  O_h = S_h V_h
//! A = concat_h(O_h)·W_O
//! P = relu(A·W_1 + b_1)·W_2 + b_2
//! ```

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::PromptNetParams;
use crate::error::{Error, Result};
use crate::math::softmax_rows;

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    tokens: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    /// Attention probabilities per head, each `[prompt_len × tokens]`.
    attention: Vec<Array2<f64>>,
    /// Concatenated head outputs `[prompt_len × hidden]`.
    heads_out: Array2<f64>,
    attended: Array2<f64>,
    /// Post-ReLU hidden layer.
    hidden: Array2<f64>,
}

pub fn prompt_net_forward(params: &PromptNetParams, class_tokens: ArrayView2<f64>) -> Result<Array2<f64>> {
    forward_with_cache(params, class_tokens).map(|(p, _)| p)
}

pub fn forward_with_cache(
    params: &PromptNetParams,
    class_tokens: ArrayView2<f64>,
) -> Result<(Array2<f64>, NetCache)> {
    let shape = params.shape();
    if class_tokens.nrows() == 0 {
        return Err(Error::Argument("class token sequence is empty".into()));
    }
    if class_tokens.ncols() != params.w_k.nrows() {
        return Err(Error::Shape(format!(
            "class tokens have width {}, network expects {}",
            class_tokens.ncols(),
            params.w_k.nrows()
        )));
    }
    if class_tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("class tokens contain non-finite values".into()));
    }
    let head_dim = shape.hidden / shape.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let keys = class_tokens.dot(&params.w_k);
    let values = class_tokens.dot(&params.w_v);
    let mut heads_out = Array2::zeros((shape.prompt_len, shape.hidden));
    let mut attention = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut logits = params.query.slice(cols).dot(&keys.slice(cols).t()) * scale;
        softmax_rows(&mut logits);
        heads_out.slice_mut(cols).assign(&logits.dot(&values.slice(cols)));
        attention.push(logits);
    }
    let attended = heads_out.dot(&params.w_o);
    let mut hidden = attended.dot(&params.mlp_w1) + &params.mlp_b1;
    hidden.mapv_inplace(|v| v.max(0.0));
    let prompts = hidden.dot(&params.mlp_w2) + &params.mlp_b2;
    Ok((
        prompts,
        NetCache {
            tokens: class_tokens.to_owned(),
            keys,
            values,
            attention,
            heads_out,
            attended,
            hidden,
        },
    ))
}

/// Gradient of a scalar loss with respect to every parameter, given its
/// gradient with respect to the emitted prompt tokens.
pub fn prompt_net_backward(
    params: &PromptNetParams,
    cache: &NetCache,
    grad_prompts: &Array2<f64>,
) -> PromptNetParams {
    let shape = params.shape();
    let head_dim = shape.hidden / shape.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut grad = params.zeros_like();

    grad.mlp_w2 = cache.hidden.t().dot(grad_prompts);
    grad.mlp_b2 = grad_prompts.sum_axis(Axis(0));
    let mut grad_pre = grad_prompts.dot(&params.mlp_w2.t());
    ndarray::Zip::from(&mut grad_pre)
        .and(&cache.hidden)
        .for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
    grad.mlp_w1 = cache.attended.t().dot(&grad_pre);
    grad.mlp_b1 = grad_pre.sum_axis(Axis(0));
    let grad_attended = grad_pre.dot(&params.mlp_w1.t());
    grad.w_o = cache.heads_out.t().dot(&grad_attended);
    let grad_heads = grad_attended.dot(&params.w_o.t());

    let mut grad_keys = Array2::zeros(cache.keys.raw_dim());
    let mut grad_values = Array2::zeros(cache.values.raw_dim());
    for (h, probs) in cache.attention.iter().enumerate() {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let grad_out = grad_heads.slice(cols);
        grad_values.slice_mut(cols).assign(&probs.t().dot(&grad_out));
        let grad_probs = grad_out.dot(&cache.values.slice(cols).t());
        // softmax backward, row by row
        let row_dot = (&grad_probs * probs).sum_axis(Axis(1)).insert_axis(Axis(1));
        let grad_logits = probs * &(&grad_probs - &row_dot) * scale;
        grad.query
            .slice_mut(cols)
            .assign(&grad_logits.dot(&cache.keys.slice(cols)));
        grad_keys
            .slice_mut(cols)
            .assign(&grad_logits.t().dot(&params.query.slice(cols)));
    }
    grad.w_k = cache.tokens.t().dot(&grad_keys);
    grad.w_v = cache.tokens.t().dot(&grad_values);
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_matrix, seeded_rng};
    use crate::prompt::params::NetShape;
    use ndarray::Array1;

    #[test]
    fn bias_only_network_emits_bias_rows() {
        let shape = NetShape {
            prompt_len: 3,
            hidden: 4,
            heads: 2,
            token_dim: 5,
        };
        let mut p = PromptNetParams::zeros(shape).unwrap();
        p.mlp_b2 = Array1::from(vec![0.5, -1.0, 2.0, 0.0, 3.25]);
        let t = gaussian_matrix(8, 5, 1.0, &mut seeded_rng(0, &[]));
        let out = prompt_net_forward(&p, t.view()).unwrap();
        assert_eq!(out.dim(), (3, 5));
        for row in out.rows() {
            assert_eq!(row, p.mlp_b2);
        }
    }

    #[test]
    fn wrong_token_width_is_a_shape_error() {
        let shape = NetShape {
            prompt_len: 1,
            hidden: 4,
            heads: 2,
            token_dim: 5,
        };
        let p = PromptNetParams::init(shape, 0).unwrap();
        let t = Array2::<f64>::ones((2, 4));
        assert!(matches!(prompt_net_forward(&p, t.view()), Err(Error::Shape(_))));
        let empty = Array2::<f64>::zeros((0, 5));
        assert!(matches!(
            prompt_net_forward(&p, empty.view()),
            Err(Error::Argument(_))
        ));
    }
}
