//! Synthetic benchmark tasks: sparse Markov chains with repeated phrases.
//!
//! A task family fixes a shared base transition table; each problem adds its
//! own set of phrases on top, so trajectories of one problem repeat each
//! other's phrases while different problems do not.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::model::{MarkovModel, MarkovModelSpec, ModelError, Pattern, TargetModel, DEFAULT_TEMPERATURE};
use crate::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub name: String,
    pub vocab_size: usize,
    /// Tokens with nonzero probability in each base row.
    pub support: usize,
    /// Gamma shape of the row weights; small values give peaked rows.
    pub concentration: f64,
    pub pattern_count: usize,
    pub pattern_len_min: usize,
    pub pattern_len_max: usize,
    pub pattern_prob: f64,
    pub temperature: f64,
    pub prompt_len: usize,
    pub max_tokens: usize,
}

impl TaskFamily {
    /// Self-similar task used for tuning and most benchmarks.
    pub fn redundant() -> Self {
        Self {
            name: "redundant".into(),
            vocab_size: 256,
            support: 12,
            concentration: 0.5,
            pattern_count: 24,
            pattern_len_min: 6,
            pattern_len_max: 20,
            pattern_prob: 0.85,
            temperature: DEFAULT_TEMPERATURE,
            prompt_len: 8,
            max_tokens: 256,
        }
    }

    /// A second family with a different vocabulary and flatter rows, never
    /// used for tree optimization.
    pub fn ood() -> Self {
        Self {
            name: "ood".into(),
            vocab_size: 192,
            support: 20,
            concentration: 0.8,
            pattern_count: 16,
            pattern_len_min: 4,
            pattern_len_max: 12,
            pattern_prob: 0.75,
            temperature: DEFAULT_TEMPERATURE,
            prompt_len: 8,
            max_tokens: 256,
        }
    }

    /// Tiny fully supported chain for exhaustive distribution checks.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            vocab_size: 8,
            support: 8,
            concentration: 1.0,
            pattern_count: 3,
            pattern_len_min: 4,
            pattern_len_max: 6,
            pattern_prob: 0.6,
            temperature: DEFAULT_TEMPERATURE,
            prompt_len: 2,
            max_tokens: 50,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "redundant" => Some(Self::redundant()),
            "ood" => Some(Self::ood()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Order-1 base chain without phrases.
    pub fn base_spec(&self, seed: u64) -> Result<MarkovModelSpec, ModelError> {
        let v = self.vocab_size;
        if self.support == 0 || self.support > v {
            return Err(ModelError::Spec(format!("support {} out of range for vocab {v}", self.support)));
        }
        let gamma = Gamma::new(self.concentration, 1.0).map_err(|e| ModelError::Spec(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = vec![0.0; v * v];
        for row in table.chunks_mut(v) {
            let cols = sample(&mut rng, v, self.support);
            let weights: Vec<f64> = (0..self.support).map(|_| gamma.sample(&mut rng).max(1e-6)).collect();
            let total: f64 = weights.iter().sum();
            for (c, w) in cols.iter().zip(weights) {
                row[c] = w / total;
            }
        }
        MarkovModelSpec::from_table(v, 1, Arc::new(table), None, Vec::new())
    }

    /// Phrases for one problem.
    pub fn patterns<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Pattern> {
        (0..self.pattern_count)
            .map(|_| {
                let len = rng.random_range(self.pattern_len_min..=self.pattern_len_max.max(self.pattern_len_min));
                let tokens = (0..len).map(|_| rng.random_range(0..self.vocab_size as TokenId)).collect();
                Pattern { tokens, prob: self.pattern_prob }
            })
            .collect()
    }

    /// `count` problems sharing one base chain; problem `i` depends only on
    /// `(seed, i)`.
    pub fn problems(&self, seed: u64, count: usize) -> Result<Vec<Problem>, ModelError> {
        let base = self.base_spec(derive_seed(seed, u64::MAX))?;
        (0..count).map(|i| self.problem_on(&base, seed, i)).collect()
    }

    /// Problem `index` of the set seeded by `seed`, on an existing base chain.
    pub fn problem_on(&self, base: &MarkovModelSpec, seed: u64, index: usize) -> Result<Problem, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
        let spec = base.with_patterns(self.patterns(&mut rng))?;
        let model = Arc::new(MarkovModel::new(spec, self.temperature)?);
        let mut prompt = vec![rng.random_range(0..self.vocab_size as TokenId)];
        while prompt.len() < self.prompt_len {
            let next = model.next_distribution(&prompt)?.sample(&mut rng);
            prompt.push(next);
        }
        Ok(Problem { index, model, prompt })
    }
}

/// A prompt and the target model to decode it with.
#[derive(Clone, Debug)]
pub struct Problem<M = Arc<MarkovModel>> {
    pub index: usize,
    pub model: M,
    pub prompt: Vec<TokenId>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_rows_have_requested_support() {
        let family = TaskFamily::redundant();
        let spec = family.base_spec(1).unwrap();
        for row in spec.table().chunks(family.vocab_size).take(20) {
            assert_eq!(row.iter().filter(|p| **p > 0.0).count(), family.support);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn problems_are_reproducible_and_share_the_base() {
        let family = TaskFamily::ood();
        let a = family.problems(3, 4).unwrap();
        let b = family.problems(3, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.prompt, y.prompt);
            assert_eq!(x.model.spec().patterns(), y.model.spec().patterns());
        }
        assert!(Arc::ptr_eq(a[0].model.spec().table(), a[1].model.spec().table()));
        assert_ne!(a[0].model.spec().patterns(), a[1].model.spec().patterns());
        assert_eq!(a[0].prompt.len(), family.prompt_len);
    }

    #[test]
    fn families_by_name() {
        assert_eq!(TaskFamily::by_name("tiny").unwrap().vocab_size, 8);
        assert!(TaskFamily::by_name("nope").is_none());
    }
}
