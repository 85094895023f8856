//! Frozen text-encoder stand-in: mean-pool the token sequence, project with a
//! fixed orthonormal matrix, L2-normalize.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::math::{gaussian_matrix, l2_norm, orthonormalize_columns, seeded_rng};

/// Seed of the projection shared by the synthetic store generator and the
/// default training configuration.
pub const DEFAULT_STUB_SEED: u64 = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderStub {
    /// `[token_dim × dim]`; columns orthonormal when `token_dim >= dim`,
    /// rows orthonormal otherwise.
    projection: Array2<f64>,
    seed: u64,
}

/// Forward result kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub feature: Array1<f64>,
    /// Norm of the projected vector before normalization.
    pub norm: f64,
    /// Total number of pooled tokens (prompt + class).
    pub tokens: usize,
}

impl TextEncoderStub {
    pub fn new(token_dim: usize, dim: usize, seed: u64) -> Result<Self> {
        if token_dim == 0 || dim == 0 {
            return Err(Error::Argument("text encoder dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed, &[0x7e47]);
        let projection = if token_dim >= dim {
            orthonormalize_columns(gaussian_matrix(token_dim, dim, 1.0, &mut rng))
        } else {
            orthonormalize_columns(gaussian_matrix(dim, token_dim, 1.0, &mut rng))
                .t()
                .as_standard_layout()
                .into_owned()
        };
        Ok(Self { projection, seed })
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Projects a single token-space vector and normalizes it.
    pub fn project_normalized(&self, pooled: &Array1<f64>) -> Result<Array1<f64>> {
        let z = pooled.dot(&self.projection);
        let norm = l2_norm(z.view());
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateInput(
                "projected text vector has zero or non-finite norm".into(),
            ));
        }
        Ok(z / norm)
    }

    pub fn encode(
        &self,
        prompt_tokens: ArrayView2<f64>,
        class_tokens: ArrayView2<f64>,
    ) -> Result<Array1<f64>> {
        self.encode_with_cache(prompt_tokens, class_tokens)
            .map(|e| e.feature)
    }

    pub fn encode_with_cache(
        &self,
        prompt_tokens: ArrayView2<f64>,
        class_tokens: ArrayView2<f64>,
    ) -> Result<EncodedText> {
        let td = self.token_dim();
        if prompt_tokens.ncols() != td || class_tokens.ncols() != td {
            return Err(Error::Shape(format!(
                "text tokens must have width {td}, got prompt {} and class {}",
                prompt_tokens.ncols(),
                class_tokens.ncols()
            )));
        }
        let tokens = prompt_tokens.nrows() + class_tokens.nrows();
        if tokens == 0 {
            return Err(Error::DegenerateInput("empty token sequence".into()));
        }
        let pooled = (prompt_tokens.sum_axis(Axis(0)) + class_tokens.sum_axis(Axis(0))) / tokens as f64;
        if pooled.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite text tokens".into()));
        }
        let z = pooled.dot(&self.projection);
        let norm = l2_norm(z.view());
        if !(norm > 0.0) {
            return Err(Error::DegenerateInput(
                "pooled text tokens project to the zero vector".into(),
            ));
        }
        Ok(EncodedText {
            feature: z / norm,
            norm,
            tokens,
        })
    }

    /// Gradient with respect to each prompt token row (identical for every row,
    /// since pooling is a plain mean).
    pub fn backward_prompt_row(&self, enc: &EncodedText, grad_feature: &Array1<f64>) -> Array1<f64> {
        let f = &enc.feature;
        let radial = f.dot(grad_feature);
        let grad_z = (grad_feature - &(f * radial)) / enc.norm;
        self.projection.dot(&grad_z) / enc.tokens as f64
    }
}
