//! JSON wire format of the remote logit server.
//!
//! ```text
//! POST /v1/next_dist   {"context": [int, ...], "temperature": float}
//! 200 OK               {"vocab_size": int, "ids": [int, ...], "probs": [float, ...]}
//! ```
//!
//! Responses are sparse: omitted ids carry zero probability.

use serde::{Deserialize, Serialize};

use super::{DenseDistribution, ModelError, DISTRIBUTION_TOLERANCE};
use crate::TokenId;

pub const NEXT_DIST_PATH: &str = "/v1/next_dist";

/// Mass tolerance accepted from the wire before renormalizing.
pub const WIRE_MASS_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextDistRequest {
    pub context: Vec<TokenId>,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextDistResponse {
    pub vocab_size: usize,
    pub ids: Vec<TokenId>,
    pub probs: Vec<f64>,
}

/// Encodes the non-zero entries of `dist`.
pub fn sparsify(dist: &DenseDistribution) -> NextDistResponse {
    let (ids, probs) = dist
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, &p)| (i as TokenId, p))
        .unzip();
    NextDistResponse { vocab_size: dist.vocab_size(), ids, probs }
}

/// Decodes a sparse response into a dense distribution over `vocab_size`.
///
/// Mass within [`WIRE_MASS_TOLERANCE`] of one is renormalized; mass already
/// within the dense tolerance is kept bit-for-bit.
pub fn densify(response: &NextDistResponse, vocab_size: usize) -> Result<DenseDistribution, ModelError> {
    if response.vocab_size != vocab_size {
        return Err(ModelError::Protocol(format!(
            "server vocab_size {} does not match expected {vocab_size}",
            response.vocab_size
        )));
    }
    if response.ids.len() != response.probs.len() {
        return Err(ModelError::Protocol(format!(
            "{} ids but {} probs",
            response.ids.len(),
            response.probs.len()
        )));
    }
    let mut probs = vec![0.0; vocab_size];
    let mut seen = vec![false; vocab_size];
    for (&id, &p) in response.ids.iter().zip(&response.probs) {
        let slot = id as usize;
        if slot >= vocab_size {
            return Err(ModelError::Protocol(format!("id {id} is outside vocab of size {vocab_size}")));
        }
        if std::mem::replace(&mut seen[slot], true) {
            return Err(ModelError::Protocol(format!("duplicate id {id}")));
        }
        if !(p.is_finite() && p >= 0.0) {
            return Err(ModelError::Protocol(format!("probability {p} for id {id}")));
        }
        probs[slot] = p;
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > WIRE_MASS_TOLERANCE {
        return Err(ModelError::Protocol(format!("probabilities sum to {total}")));
    }
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        probs.iter_mut().for_each(|p| *p /= total);
    }
    DenseDistribution::new(probs).map_err(|e| ModelError::Protocol(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn response(vocab_size: usize, ids: Vec<TokenId>, probs: Vec<f64>) -> NextDistResponse {
        NextDistResponse { vocab_size, ids, probs }
    }

    #[test]
    fn single_id_becomes_one_hot() {
        let d = densify(&response(8, vec![3], vec![1.0]), 8).unwrap();
        assert_eq!(d, DenseDistribution::one_hot(8, 3));
    }

    #[test]
    fn slightly_short_mass_is_renormalized() {
        let d = densify(&response(4, vec![0, 2], vec![0.5, 0.499999]), 4).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.prob(0) > d.prob(2));
    }

    #[test]
    fn protocol_violations() {
        assert!(matches!(densify(&response(8, vec![8], vec![1.0]), 8), Err(ModelError::Protocol(_))));
        assert!(matches!(densify(&response(8, vec![1, 1], vec![0.5, 0.5]), 8), Err(ModelError::Protocol(_))));
        assert!(matches!(densify(&response(8, vec![1], vec![0.9]), 8), Err(ModelError::Protocol(_))));
        assert!(matches!(densify(&response(9, vec![1], vec![1.0]), 8), Err(ModelError::Protocol(_))));
        assert!(matches!(densify(&response(8, vec![1, 2], vec![1.0]), 8), Err(ModelError::Protocol(_))));
    }

    proptest! {
        #[test]
        fn densify_inverts_sparsify(weights in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], 2..40)) {
            prop_assume!(weights.iter().any(|w| *w > 0.0));
            let d = DenseDistribution::from_weights(weights).unwrap();
            let wire = serde_json::to_string(&sparsify(&d)).unwrap();
            let back: NextDistResponse = serde_json::from_str(&wire).unwrap();
            prop_assert_eq!(densify(&back, d.vocab_size()).unwrap(), d);
        }
    }
}
