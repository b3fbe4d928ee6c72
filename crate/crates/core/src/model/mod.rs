//! Target-model abstraction and the three bundled implementations.
//!
//! Every model returns *post-temperature* probabilities: the n-gram store and
//! the verifier both see exactly the distribution the sampler draws from.

mod corpus;
mod markov;
mod remote;
pub mod wire;

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::TokenId;

pub use corpus::CorpusReplayModel;
pub use markov::{MarkovModel, MarkovModelSpec, MarkovSpecFile, Pattern};
pub use remote::{RemoteConfig, RemoteModel};

/// Default sampling temperature used throughout the benchmarks.
pub const DEFAULT_TEMPERATURE: f64 = 0.6;

/// Tolerance on the total mass of a [`DenseDistribution`].
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    OutOfVocab { token: TokenId, vocab_size: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sampling configuration shared by all model implementations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, temperature: f64, seed: u64) -> Result<Self, ModelError> {
        if vocab_size < 2 {
            return Err(ModelError::Spec(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ModelError::Spec(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { vocab_size, temperature, seed })
    }
}

/// A next-token distribution over the full vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDistribution {
    probs: Vec<f64>,
}

impl DenseDistribution {
    /// Wraps `probs` after checking it is a valid distribution (non-negative,
    /// total mass 1 within [`DISTRIBUTION_TOLERANCE`]).
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.len() < 2 {
            return Err(ModelError::InvalidDistribution(format!(
                "vocabulary of size {} is too small",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(ModelError::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(ModelError::InvalidDistribution(format!("mass is {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self, ModelError> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
            return Err(ModelError::InvalidDistribution(format!("weight {i} is {w}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(ModelError::InvalidDistribution("all weights are zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(weights)
    }

    pub fn one_hot(vocab_size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self { probs: vec![1.0 / vocab_size as f64; vocab_size] }
    }

    /// Wraps probabilities the caller has already normalized.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self { probs }
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token as usize).copied().unwrap_or(0.0)
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Returns the `k` most probable tokens with positive mass, sorted by
    /// descending probability with ties broken by ascending token id.
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        let mut top: Vec<(TokenId, f64)> = Vec::with_capacity(k + 1);
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            if top.len() == k && !ranks_before(p, i as TokenId, top[k - 1]) {
                continue;
            }
            let pos = top.partition_point(|&entry| ranks_before(entry.1, entry.0, (i as TokenId, p)));
            top.insert(pos, (i as TokenId, p));
            top.truncate(k);
        }
        top
    }

    /// Inverse-CDF sample for a uniform draw `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> TokenId {
        sample_index(&self.probs, u) as TokenId
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        self.sample_with(rng.random::<f64>())
    }

    /// Rescales the distribution to temperature `t`: `p_i^(1/t)` renormalized.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        Self { probs: apply_temperature(&self.probs, temperature) }
    }

    /// Total-variation distance to `other`.
    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// `true` if `(token_a, p_a)` ranks strictly before `b` in the canonical
/// order: descending probability, then ascending token id.
#[inline]
pub(crate) fn ranks_before(p_a: f64, token_a: TokenId, b: (TokenId, f64)) -> bool {
    p_a > b.1 || (p_a == b.1 && token_a < b.0)
}

/// Inverse-CDF lookup over unnormalized weights. Falls back to the last
/// positive entry when rounding leaves `u` past the cumulative total.
pub(crate) fn sample_index(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = i;
        if target < acc {
            return i;
        }
    }
    last_positive
}

/// Applies temperature in the log domain so tiny temperatures degrade to an
/// argmax one-hot (split evenly across exact ties) instead of underflowing.
pub fn apply_temperature(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        let total: f64 = probs.iter().sum();
        return probs.iter().map(|p| p / total).collect();
    }
    let inv_t = 1.0 / temperature;
    let max_log = probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { ((p.ln() - max_log) * inv_t).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Abstract next-token distribution provider.
///
/// Implementations must be deterministic: the same context always yields the
/// same distribution.
pub trait TargetModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, context: &[TokenId]) -> Result<DenseDistribution, ModelError>;

    /// Reference autoregressive sampler.
    fn sample_next(&self, context: &[TokenId], rng: &mut dyn rand::RngCore) -> Result<TokenId, ModelError> {
        Ok(self.next_distribution(context)?.sample(rng))
    }
}

impl<M: TargetModel + ?Sized> TargetModel for std::sync::Arc<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<DenseDistribution, ModelError> {
        (**self).next_distribution(context)
    }
}

pub(crate) fn check_context(context: &[TokenId], vocab_size: usize) -> Result<(), ModelError> {
    match context.iter().find(|&&t| t as usize >= vocab_size) {
        Some(&token) => Err(ModelError::OutOfVocab { token, vocab_size }),
        None => Ok(()),
    }
}

/// Samples `len` tokens autoregressively after `prompt`.
pub fn sample_trajectory<M: TargetModel + ?Sized, R: rand::RngCore>(
    model: &M,
    prompt: &[TokenId],
    len: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>, ModelError> {
    let mut context = prompt.to_vec();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let token = model.sample_next(&context, rng)?;
        context.push(token);
        out.push(token);
    }
    Ok(out)
}

impl fmt::Display for DenseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, p) in self.probs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{p:.4}")?;
        }
        write!(f, "]")
    }
}
