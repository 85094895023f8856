use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::math::{l2_norm, softmax_scaled};

const NORM_TOL: f64 = 1e-4;

/// Cosine similarity of one image against each text feature row. Both sides
/// must already be unit-norm, so this is a plain dot product.
pub fn class_scores(image_emb: ArrayView1<f64>, text_features: ArrayView2<f64>) -> Result<Array1<f64>> {
    if text_features.ncols() != image_emb.len() {
        return Err(Error::Shape(format!(
            "image dimension {} vs text dimension {}",
            image_emb.len(),
            text_features.ncols()
        )));
    }
    check_unit(image_emb, "image embedding")?;
    for (j, row) in text_features.rows().into_iter().enumerate() {
        check_unit(row, &format!("text feature {j}"))?;
    }
    Ok(text_features.dot(&image_emb).mapv(|s| s.clamp(-1.0, 1.0)))
}

fn check_unit(v: ArrayView1<f64>, what: &str) -> Result<()> {
    let n = l2_norm(v);
    if (n - 1.0).abs() > NORM_TOL {
        return Err(Error::Contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Temperature softmax `exp(s_j/τ) / Σ_k exp(s_k/τ)`.
pub fn softmax_probs(scores: ArrayView1<f64>, tau: f64) -> Result<Array1<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Argument("no scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Argument("scores must be finite".into()));
    }
    Ok(softmax_scaled(scores, tau))
}

/// Negative log-likelihood of `label`.
pub fn ce_loss(probs: ArrayView1<f64>, label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Argument(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_vector, seeded_rng};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn self_similarity_and_orthogonality() {
        let text = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let s = class_scores(array![0.0, 0.0, 1.0].view(), text.view()).unwrap();
        assert_eq!(s[2], 1.0);
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn scores_match_explicit_cosine() {
        let mut rng = seeded_rng(21, &[]);
        let unit = |v: Array1<f64>| &v / l2_norm(v.view());
        let img = unit(gaussian_vector(16, 1.0, &mut rng));
        let rows: Vec<Array1<f64>> = (0..5).map(|_| unit(gaussian_vector(16, 1.0, &mut rng))).collect();
        let text = Array2::from_shape_fn((5, 16), |(i, j)| rows[i][j]);
        let s = class_scores(img.view(), text.view()).unwrap();
        for (j, row) in rows.iter().enumerate() {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for k in 0..16 {
                ab += img[k] * row[k];
                aa += img[k] * img[k];
                bb += row[k] * row[k];
            }
            assert!((s[j] - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-12);
        }
    }

    #[test]
    fn non_unit_input_breaks_contract() {
        let text = array![[1.0, 0.0]];
        assert!(matches!(
            class_scores(array![2.0, 0.0].view(), text.view()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn equal_scores_are_uniform() {
        let p = softmax_probs(array![0.3, 0.3, 0.3, 0.3].view(), 0.07).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_logistic() {
        let p = softmax_probs(array![1.0, 0.0].view(), 1.0).unwrap();
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        assert!(matches!(
            softmax_probs(array![1.0].view(), 0.0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            softmax_probs(array![1.0].view(), -1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = array![0.25, 0.25, 0.25, 0.25];
        assert!((ce_loss(uniform.view(), 3).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(ce_loss(array![0.0, 1.0].view(), 1).unwrap(), 0.0);
        // [0.7311, 0.2689] is the rounded display of softmax([1, 0]); −ln of
        // the exact second entry is ln(1 + e).
        let probs = softmax_probs(array![1.0, 0.0].view(), 1.0).unwrap();
        let l = ce_loss(probs.view(), 1).unwrap();
        assert!((l - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((l - 1.31326).abs() < 1e-4);
        assert!(matches!(ce_loss(uniform.view(), 4), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(
            scores in prop::collection::vec(-1.0f64..1.0, 1..12),
            shift in -50.0f64..50.0,
            tau in 0.01f64..10.0,
        ) {
            let a = Array1::from(scores.clone());
            let p = softmax_probs(a.view(), tau).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            let q = softmax_probs((&a + shift).view(), tau).unwrap();
            for (x, y) in p.iter().zip(q.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_ignores_temperature(scores in prop::collection::vec(-1.0f64..1.0, 2..12)) {
            let a = Array1::from(scores);
            let argmax = |p: &Array1<f64>| {
                p.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
            };
            let base = argmax(&softmax_probs(a.view(), 1.0).unwrap());
            for tau in [0.01, 100.0] {
                prop_assert_eq!(argmax(&softmax_probs(a.view(), tau).unwrap()), base);
            }
        }
    }
}
