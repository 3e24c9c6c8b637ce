//! Scoring primitives for memory retrieval: exponential recency decay,
//! cosine relevance, peer-similarity importance, and their weighted sum.

use serde::{Deserialize, Serialize};

use super::MemoryError;
use crate::embedding::EmbeddingVector;

/// Exponential decay weight `e^(-lambda * elapsed)`.
///
/// Negative `elapsed` (clock skew) is treated as zero.
pub fn recency_weight(elapsed: f64, lambda: f64) -> Result<f64, MemoryError> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(MemoryError::Parameter(format!(
            "decay constant must be positive and finite, got {lambda}"
        )));
    }
    if elapsed.is_nan() {
        return Err(MemoryError::Parameter("elapsed time is NaN".into()));
    }
    Ok(libm::exp(-lambda * elapsed.max(0.0)))
}

/// Cosine of the angle between two vectors. A zero-norm operand yields 0.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MemoryError> {
    if a.dimension() != b.dimension() {
        return Err(MemoryError::Dimension {
            expected: a.dimension(),
            actual: b.dimension(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Maps a cosine in [-1, 1] onto [0, 1].
pub fn normalized_similarity(cosine: f64) -> f64 {
    (cosine + 1.0) / 2.0
}

/// Mean normalized similarity of `target` to its conversation peers
/// (the target itself excluded). No peers gives the neutral 0.5.
pub fn importance_score(target: &EmbeddingVector, peers: &[&EmbeddingVector]) -> Result<f64, MemoryError> {
    if peers.is_empty() {
        return Ok(0.5);
    }
    let mut sum = 0.0;
    for peer in peers {
        sum += normalized_similarity(cosine_similarity(target, peer)?);
    }
    Ok(sum / peers.len() as f64)
}

/// Non-negative weights on recency, relevance and importance, stored
/// normalized to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct RetrievalWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl TryFrom<RawWeights> for RetrievalWeights {
    type Error = MemoryError;

    fn try_from(w: RawWeights) -> Result<Self, Self::Error> {
        RetrievalWeights::new(w.alpha, w.beta, w.gamma)
    }
}

impl From<RetrievalWeights> for RawWeights {
    fn from(w: RetrievalWeights) -> Self {
        RawWeights {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        }
    }
}

impl RetrievalWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, MemoryError> {
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MemoryError::Parameter(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        let total = alpha + beta + gamma;
        if !(total > 0.0) {
            return Err(MemoryError::Parameter("alpha + beta + gamma must be positive".into()));
        }
        Ok(Self {
            alpha: alpha / total,
            beta: beta / total,
            gamma: gamma / total,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for RetrievalWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
        }
    }
}

/// Weighted sum of the three components, each of which must lie in [0, 1].
pub fn composite_score(
    recency: f64,
    relevance: f64,
    importance: f64,
    w: &RetrievalWeights,
) -> Result<f64, MemoryError> {
    for (name, v) in [
        ("recency", recency),
        ("relevance", relevance),
        ("importance", importance),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MemoryError::Parameter(format!(
                "{name} component must lie in [0, 1], got {v}"
            )));
        }
    }
    let s = w.alpha * recency + w.beta * relevance + w.gamma * importance;
    Ok(s.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn recency_examples() {
        assert_eq!(recency_weight(0.0, 0.5).unwrap(), 1.0);
        assert!((recency_weight(1.0, std::f64::consts::LN_2).unwrap() - 0.5).abs() < 1e-12);
        // e^-1 = 0.36787944117144233
        assert!((recency_weight(100.0, 0.01).unwrap() - 0.367_879_441_171_442_33).abs() < 1e-12);
    }

    #[test]
    fn recency_clamps_negative_elapsed() {
        assert_eq!(recency_weight(-30.0, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn recency_rejects_bad_lambda() {
        assert!(recency_weight(1.0, 0.0).is_err());
        assert!(recency_weight(1.0, -2.0).is_err());
        assert!(recency_weight(1.0, f64::NAN).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - 0.707_106_781_186_547_5).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(MemoryError::Dimension { .. })
        ));
    }

    #[test]
    fn importance_examples() {
        let t = v(&[1.0, 0.0]);
        let same = v(&[1.0, 0.0]);
        assert_eq!(importance_score(&t, &[&same, &same]).unwrap(), 1.0);
        assert_eq!(importance_score(&t, &[]).unwrap(), 0.5);
        let p1 = v(&[0.0, 1.0]);
        let p2 = v(&[1.0, 1.0]);
        // mean of 0.5 and (1 + 1/sqrt 2)/2
        let expected = (0.5 + (1.0 + std::f64::consts::FRAC_1_SQRT_2) / 2.0) / 2.0;
        assert!((importance_score(&t, &[&p1, &p2]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.676_776_695).abs() < 1e-9);
    }

    #[test]
    fn composite_examples() {
        let w = RetrievalWeights::new(0.2, 0.5, 0.3).unwrap();
        assert!((composite_score(0.42, 0.42, 0.42, &w).unwrap() - 0.42).abs() < 1e-12);
        assert!((composite_score(1.0, 1.0, 1.0, &w).unwrap() - 1.0).abs() < 1e-12);
        let eq = RetrievalWeights::new(1.0, 1.0, 1.0).unwrap();
        assert!((composite_score(0.9, 0.2, 0.6, &eq).unwrap() - 0.566_667).abs() < 1e-6);
    }

    #[test]
    fn composite_rejects_out_of_range() {
        let w = RetrievalWeights::default();
        assert!(composite_score(1.1, 0.0, 0.0, &w).is_err());
        assert!(composite_score(0.0, -0.1, 0.0, &w).is_err());
    }

    #[test]
    fn weights_normalize_and_validate() {
        let w = RetrievalWeights::new(2.0, 1.0, 1.0).unwrap();
        assert_eq!((w.alpha(), w.beta(), w.gamma()), (0.5, 0.25, 0.25));
        assert!(RetrievalWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(RetrievalWeights::new(-1.0, 1.0, 1.0).is_err());
        let parsed: Result<RetrievalWeights, _> = serde_json::from_str(r#"{"alpha":0,"beta":0,"gamma":0}"#);
        assert!(parsed.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (2usize..16).prop_flat_map(|n| {
                (
                    prop::collection::vec(-100.0f64..100.0, n),
                    prop::collection::vec(-100.0f64..100.0, n),
                )
            })
        }

        proptest! {
            #[test]
            fn recency_strictly_decreasing(t1 in 0.0f64..3e5, dt in 1e-3f64..3e5, lambda in 1e-6f64..1e-3) {
                prop_assert!(recency_weight(t1, lambda).unwrap() > recency_weight(t1 + dt, lambda).unwrap());
            }

            #[test]
            fn cosine_properties((a, b) in vecs(), c in 0.01f64..100.0) {
                prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
                let (va, vb) = (v(&a), v(&b));
                let ab = cosine_similarity(&va, &vb).unwrap();
                prop_assert!((-1.0..=1.0).contains(&ab));
                prop_assert!((ab - cosine_similarity(&vb, &va).unwrap()).abs() < 1e-12);
                prop_assert!((cosine_similarity(&va, &va).unwrap() - 1.0).abs() < 1e-9);
                let scaled = v(&a.iter().map(|x| x * c).collect::<Vec<_>>());
                prop_assert!((cosine_similarity(&scaled, &vb).unwrap() - ab).abs() < 1e-9);
            }

            #[test]
            fn composite_bounded_and_monotone(
                r in 0.0f64..=1.0, s in 0.0f64..=1.0, i in 0.0f64..=1.0, bump in 0.0f64..=1.0,
                a in 0.0f64..5.0, b in 0.0f64..5.0, g in 0.01f64..5.0,
            ) {
                let w = RetrievalWeights::new(a, b, g).unwrap();
                let base = composite_score(r, s, i, &w).unwrap();
                prop_assert!((0.0..=1.0).contains(&base));
                let r2 = (r + bump).min(1.0);
                prop_assert!(composite_score(r2, s, i, &w).unwrap() >= base);
                let i2 = (i + bump).min(1.0);
                prop_assert!(composite_score(r, s, i2, &w).unwrap() >= base);
            }
        }
    }
}
