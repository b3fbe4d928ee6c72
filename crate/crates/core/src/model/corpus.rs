use rustc_hash::FxHashMap;

use super::{apply_temperature, check_context, DenseDistribution, ModelError, TargetModel};
use crate::TokenId;

/// Replays the next-token statistics of a fixed token corpus.
///
/// The distribution for a context is the empirical next-token histogram of
/// the longest context suffix (up to `max_order` tokens) seen in the corpus,
/// mixed with `smoothing` of uniform mass so every token stays reachable.
#[derive(Clone, Debug)]
pub struct CorpusReplayModel {
    vocab_size: usize,
    max_order: usize,
    smoothing: f64,
    temperature: f64,
    counts: FxHashMap<Vec<TokenId>, FxHashMap<TokenId, u64>>,
    unigram: Vec<u64>,
}

impl CorpusReplayModel {
    pub fn new(
        vocab_size: usize,
        sequences: &[Vec<TokenId>],
        max_order: usize,
        smoothing: f64,
        temperature: f64,
    ) -> Result<Self, ModelError> {
        if vocab_size < 2 {
            return Err(ModelError::Spec("vocab_size must be >= 2".into()));
        }
        if max_order == 0 {
            return Err(ModelError::Spec("max_order must be >= 1".into()));
        }
        if !(smoothing > 0.0 && smoothing <= 1.0) {
            return Err(ModelError::Spec(format!("smoothing {smoothing} not in (0, 1]")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ModelError::Spec(format!("temperature must be positive, got {temperature}")));
        }
        let mut counts: FxHashMap<Vec<TokenId>, FxHashMap<TokenId, u64>> = FxHashMap::default();
        let mut unigram = vec![0u64; vocab_size];
        for seq in sequences {
            check_context(seq, vocab_size)?;
            for (i, &next) in seq.iter().enumerate() {
                unigram[next as usize] += 1;
                for n in 1..=max_order.min(i) {
                    *counts.entry(seq[i - n..i].to_vec()).or_default().entry(next).or_default() += 1;
                }
            }
        }
        Ok(Self { vocab_size, max_order, smoothing, temperature, counts, unigram })
    }
}

impl TargetModel for CorpusReplayModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<DenseDistribution, ModelError> {
        check_context(context, self.vocab_size)?;
        let mut empirical = vec![0.0; self.vocab_size];
        let hit = (1..=self.max_order.min(context.len()))
            .rev()
            .find_map(|n| self.counts.get(&context[context.len() - n..]));
        match hit {
            Some(next) => next.iter().for_each(|(&t, &c)| empirical[t as usize] = c as f64),
            None => self.unigram.iter().enumerate().for_each(|(t, &c)| empirical[t] = c as f64),
        }
        let total: f64 = empirical.iter().sum();
        let uniform = self.smoothing / self.vocab_size as f64;
        let probs: Vec<f64> = empirical
            .iter()
            .map(|&c| if total > 0.0 { (1.0 - self.smoothing) * c / total + uniform } else { 1.0 / self.vocab_size as f64 })
            .collect();
        Ok(DenseDistribution { probs: apply_temperature(&probs, self.temperature) })
    }
}
