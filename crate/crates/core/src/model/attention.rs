//! Masked-attention kernels: the additive attention mask, the masked
//! cross-attention primitive and the dot-product mask head.
//!
//! These are plain array functions; the trainable model records the same
//! computations on the autodiff tape and the tests cross-check the two paths.

use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{ensure_finite, softmax_rows_in_place, NEG_LARGE};

/// N x P additive attention mask with entries in {0, -LARGE}. Blocked
/// entries underflow to exactly zero weight after the softmax.
#[derive(Debug, Clone)]
pub struct AdditiveAttentionMask(pub Array2<f64>);

impl AdditiveAttentionMask {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_shared(self) -> Rc<Array2<f64>> {
        Rc::new(self.0)
    }
}

/// Threshold per-query soft masks into an additive attention mask: entries
/// with probability >= `tau` attend (0), the rest are blocked (-LARGE). A
/// query whose entire row would be blocked falls back to full attention.
pub fn attention_mask_from_probs(soft_masks: &Array2<f64>, tau: f64) -> AdditiveAttentionMask {
    let neg = -*NEG_LARGE;
    let mut mask = soft_masks.mapv(|p| if p >= tau { 0.0 } else { neg });
    for mut row in mask.rows_mut() {
        if row.iter().all(|&v| v != 0.0) {
            row.fill(0.0);
        }
    }
    AdditiveAttentionMask(mask)
}

/// Masked scaled-dot-product attention:
/// `softmax_rows(Q K^T / sqrt(d) + M) V`.
pub fn masked_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: &AdditiveAttentionMask,
) -> Result<Array2<f64>> {
    let d = q.ncols();
    if k.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "query width {d} vs key width {}",
            k.ncols()
        )));
    }
    if v.nrows() != k.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} keys vs {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if mask.0.dim() != (q.nrows(), k.nrows()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs scores {:?}",
            mask.0.dim(),
            (q.nrows(), k.nrows())
        )));
    }
    ensure_finite(q, "attention Q")?;
    ensure_finite(k, "attention K")?;
    ensure_finite(v, "attention V")?;

    let mut scores = q.dot(&k.t()) / (d as f64).sqrt();
    scores += &mask.0;
    softmax_rows_in_place(&mut scores);
    Ok(scores.dot(v))
}

/// Dot-product mask head: `logits[q, p] = seg[q] . pixel_features[p]`.
///
/// Accumulates each dot product in index order, so the result is bit-equal
/// to a naive loop regardless of the BLAS kernel the tape uses.
pub fn mask_head(seg: &Array2<f64>, pixel_features: &Array2<f64>) -> Result<Array2<f64>> {
    if seg.ncols() != pixel_features.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "segment width {} vs pixel feature width {}",
            seg.ncols(),
            pixel_features.ncols()
        )));
    }
    let mut logits = Array2::zeros((seg.nrows(), pixel_features.nrows()));
    for (qi, seg_row) in seg.rows().into_iter().enumerate() {
        for (p, feat_row) in pixel_features.rows().into_iter().enumerate() {
            logits[(qi, p)] = seg_row.iter().zip(feat_row.iter()).map(|(&a, &b)| a * b).sum();
        }
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    /// Naive double-loop softmax attention.
    pub(crate) fn attention_oracle(
        q: &Array2<f64>,
        k: &Array2<f64>,
        v: &Array2<f64>,
        mask: Option<&Array2<f64>>,
    ) -> Array2<f64> {
        let scale = 1.0 / (q.ncols() as f64).sqrt();
        let mut out = Array2::zeros((q.nrows(), v.ncols()));
        for qi in 0..q.nrows() {
            let mut logits = vec![0.0; k.nrows()];
            for (ki, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in 0..q.ncols() {
                    dot += q[(qi, d)] * k[(ki, d)];
                }
                *logit = dot * scale + mask.map_or(0.0, |m| m[(qi, ki)]);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = weights.iter().sum();
            for ki in 0..k.nrows() {
                for d in 0..v.ncols() {
                    out[(qi, d)] += weights[ki] / z * v[(ki, d)];
                }
            }
        }
        out
    }

    #[test]
    fn unmasked_equals_standard_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = random(&mut rng, 4, 6);
            let k = random(&mut rng, 9, 6);
            let v = random(&mut rng, 9, 5);
            let mask = AdditiveAttentionMask(Array2::zeros((4, 9)));
            let out = masked_attention(&q, &k, &v, &mask).unwrap();
            let expected = attention_oracle(&q, &k, &v, None);
            for (a, b) in out.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_unblocked_pixel_returns_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, 3, 4);
        let k = random(&mut rng, 7, 4);
        let v = random(&mut rng, 7, 4);
        let mut mask = Array2::from_elem((3, 7), -*NEG_LARGE);
        mask[(1, 5)] = 0.0;
        mask.row_mut(0).fill(0.0);
        mask.row_mut(2).fill(0.0);
        let out = masked_attention(&q, &k, &v, &AdditiveAttentionMask(mask)).unwrap();
        for d in 0..4 {
            assert_eq!(out[(1, d)], v[(5, d)]);
        }
    }

    #[test]
    fn random_instances_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random(&mut rng, 4, 8);
            let k = random(&mut rng, 9, 8);
            let v = random(&mut rng, 9, 8);
            let probs = Array2::from_shape_fn((4, 9), |_| rng.random::<f64>());
            let mask = attention_mask_from_probs(&probs, 0.5);
            let out = masked_attention(&q, &k, &v, &mask).unwrap();
            let expected = attention_oracle(&q, &k, &v, Some(mask.as_array()));
            for (a, b) in out.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blocked_positions_have_exactly_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, 2, 4);
        let k = random(&mut rng, 5, 4);
        let mut mask = Array2::zeros((2, 5));
        mask[(0, 2)] = -*NEG_LARGE;
        mask[(1, 0)] = -*NEG_LARGE;
        // One-hot value rows let the output read the weights directly.
        let v = Array2::from_shape_fn((5, 5), |(i, j)| (i == j) as usize as f64);
        let out = masked_attention(&q, &k, &v, &AdditiveAttentionMask(mask)).unwrap();
        assert_eq!(out[(0, 2)], 0.0);
        assert_eq!(out[(1, 0)], 0.0);
        for row in out.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_from_probs_thresholds_and_falls_back() {
        // All-ones probabilities attend everywhere.
        let all = attention_mask_from_probs(&Array2::from_elem((2, 3), 1.0), 0.5);
        assert!(all.as_array().iter().all(|&v| v == 0.0));

        // An all-zero row is reset to full attention.
        let mut probs = Array2::from_elem((2, 3), 0.0);
        probs[(1, 0)] = 0.9;
        let mask = attention_mask_from_probs(&probs, 0.5);
        assert!(mask.as_array().row(0).iter().all(|&v| v == 0.0));
        assert_eq!(mask.as_array()[(1, 0)], 0.0);
        assert_eq!(mask.as_array()[(1, 1)], -*NEG_LARGE);

        // Mixed row: the boundary entry at exactly tau stays unblocked.
        let probs = array![[0.6, 0.4, 0.5]];
        let mask = attention_mask_from_probs(&probs, 0.5);
        assert_eq!(mask.as_array()[(0, 0)], 0.0);
        assert_eq!(mask.as_array()[(0, 1)], -*NEG_LARGE);
        assert_eq!(mask.as_array()[(0, 2)], 0.0);
    }

    #[test]
    fn mask_head_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seg = random(&mut rng, 3, 8);
        let feats = random(&mut rng, 6, 8);
        let logits = mask_head(&seg, &feats).unwrap();
        for qi in 0..3 {
            for p in 0..6 {
                let mut dot = 0.0;
                for d in 0..8 {
                    dot += seg[(qi, d)] * feats[(p, d)];
                }
                assert_eq!(logits[(qi, p)], dot);
            }
        }
    }

    #[test]
    fn mask_head_orthogonal_and_scaled_rows() {
        // Orthogonal row: logits 0, soft mask 0.5 everywhere.
        let seg = array![[1.0, 0.0]];
        let feats = array![[0.0, 1.0], [0.0, -2.0]];
        let logits = mask_head(&seg, &feats).unwrap();
        assert_eq!(logits, array![[0.0, 0.0]]);
        assert_eq!(sigmoid(logits[(0, 0)]), 0.5);

        // seg = s * feature gives logit s * |feature|^2.
        let feat = array![[0.5, -1.5, 2.0]];
        let s = 1.75;
        let seg = feat.mapv(|v| s * v);
        let logit = mask_head(&seg, &feat).unwrap()[(0, 0)];
        let norm2: f64 = feat.iter().map(|v| v * v).sum();
        assert!((logit - s * norm2).abs() < 1e-12);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let q = Array2::zeros((2, 3));
        let k = Array2::zeros((4, 5));
        let v = Array2::zeros((4, 3));
        let mask = AdditiveAttentionMask(Array2::zeros((2, 4)));
        assert!(matches!(
            masked_attention(&q, &k, &v, &mask),
            Err(Error::ShapeMismatch(_))
        ));

        let k = Array2::zeros((4, 3));
        let mut q_bad = q.clone();
        q_bad[(0, 0)] = f64::NAN;
        assert!(matches!(
            masked_attention(&q_bad, &k, &v, &mask),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(masked_attention(&q, &k, &v, &mask).is_ok());
    }
}
