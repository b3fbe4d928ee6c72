//! Parallel sampling without replacement via the Gumbel-Top-K trick.
//!
//! Each candidate's log-probability `phi_i` is perturbed to
//! `phi_i - ln(-ln U_i)` with `U_i ~ Uniform(0, 1)`; the `k` largest
//! perturbed scores are a Plackett-Luce draw of `k` distinct candidates.
//! Noise comes from a [`NoiseSource`], normally a [`GumbelNoiseCache`] that
//! pre-draws variates in bulk and refills itself when depleted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::TokenId;

/// Default number of variates drawn per refill.
pub const DEFAULT_REFILL_SIZE: usize = 65_536;

/// Uniform draws are clamped to `[EPS, 1 - EPS]` so the noise stays finite.
const UNIFORM_EPS: f64 = 1e-12;

/// A stream of standard Gumbel variates.
pub trait NoiseSource {
    fn next_gumbel(&mut self) -> f64;
}

/// Noise-free source: turns Gumbel-Top-K into an argmax chain.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn next_gumbel(&mut self) -> f64 {
        0.0
    }
}

impl<N: NoiseSource + ?Sized> NoiseSource for &mut N {
    fn next_gumbel(&mut self) -> f64 {
        (**self).next_gumbel()
    }
}

/// Standard Gumbel variate from a uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Pre-computed Gumbel noise, consumed in draw order and refilled in bulk.
#[derive(Clone, Debug)]
pub struct GumbelNoiseCache {
    buffer: Vec<f64>,
    cursor: usize,
    refill_size: usize,
    rng: ChaCha8Rng,
    refills: u64,
    consumed: u64,
}

impl GumbelNoiseCache {
    /// Creates a cache and performs the first refill.
    pub fn new(seed: u64, refill_size: usize) -> Self {
        let mut cache = Self {
            buffer: Vec::with_capacity(refill_size.max(1)),
            cursor: 0,
            refill_size: refill_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            refills: 0,
            consumed: 0,
        };
        cache.refill();
        cache
    }

    pub fn with_default_size(seed: u64) -> Self {
        Self::new(seed, DEFAULT_REFILL_SIZE)
    }

    /// Replaces the buffer with `refill_size` fresh variates from the cache's stream.
    pub fn refill(&mut self) {
        self.buffer.clear();
        let rng = &mut self.rng;
        self.buffer.extend((0..self.refill_size).map(|_| gumbel_from_uniform(rng.random::<f64>())));
        self.cursor = 0;
        self.refills += 1;
    }

    pub fn available(&self) -> usize {
        self.buffer.len() - self.cursor
    }

    pub fn refill_size(&self) -> usize {
        self.refill_size
    }

    /// Number of refills performed, including the initial one.
    pub fn refills(&self) -> u64 {
        self.refills
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }
}

impl NoiseSource for GumbelNoiseCache {
    fn next_gumbel(&mut self) -> f64 {
        if self.cursor == self.buffer.len() {
            self.refill();
        }
        let g = self.buffer[self.cursor];
        self.cursor += 1;
        self.consumed += 1;
        g
    }
}

/// Draws up to `k` distinct tokens from `candidates` without replacement.
///
/// Probabilities are renormalized over the candidate set; zero-probability
/// candidates are dropped before perturbation and consume no noise. The
/// result is ordered by descending perturbed score and holds
/// `min(k, positive candidates)` tokens (empty when none are positive).
pub fn sample_without_replacement<N: NoiseSource + ?Sized>(
    candidates: &[(TokenId, f64)],
    k: usize,
    noise: &mut N,
) -> Vec<TokenId> {
    let total: f64 = candidates.iter().filter(|(_, p)| *p > 0.0).map(|(_, p)| p).sum();
    if k == 0 || total <= 0.0 {
        return Vec::new();
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, p))| *p > 0.0)
        .map(|(i, &(_, p))| ((p / total).ln() + noise.next_gumbel(), i))
        .collect();
    // Stable on equal scores: earlier candidates win, which keeps the
    // zero-noise case identical to the descending-probability order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| candidates[i].0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_returns_descending_probability_order() {
        let cands = [(4, 0.1), (7, 0.4), (2, 0.3), (9, 0.2)];
        assert_eq!(sample_without_replacement(&cands, 4, &mut ZeroNoise), vec![7, 2, 9, 4]);
        assert_eq!(sample_without_replacement(&cands, 2, &mut ZeroNoise), vec![7, 2]);
    }

    #[test]
    fn zero_probability_candidates_are_skipped() {
        let cands = [(1, 0.0), (2, 0.5), (3, 0.0)];
        let mut cache = GumbelNoiseCache::new(1, 16);
        assert_eq!(sample_without_replacement(&cands, 3, &mut cache), vec![2]);
        assert_eq!(cache.consumed(), 1);
        assert!(sample_without_replacement(&[(1, 0.0)], 2, &mut cache).is_empty());
        assert_eq!(cache.consumed(), 1);
    }

    #[test]
    fn fresh_cache_holds_refill_size() {
        let cache = GumbelNoiseCache::new(3, 1000);
        assert_eq!(cache.available(), 1000);
        assert_eq!(cache.refills(), 1);
    }

    #[test]
    fn overrunning_the_cache_refills_exactly_once() {
        let mut cache = GumbelNoiseCache::new(3, 100);
        for _ in 0..101 {
            cache.next_gumbel();
        }
        assert_eq!(cache.refills(), 2);
        assert_eq!(cache.available(), 99);
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut cache = GumbelNoiseCache::new(11, 4096);
        let n = 1_000_000;
        let mean = (0..n).map(|_| cache.next_gumbel()).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn k1_frequency_matches_categorical() {
        let mut cache = GumbelNoiseCache::with_default_size(5);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_without_replacement(&[(0, 0.7), (1, 0.3)], 1, &mut cache)[0] == 0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.7).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn replaying_noise_reproduces_outputs() {
        let cands = [(0, 0.2), (1, 0.3), (2, 0.1), (3, 0.4)];
        let mut a = GumbelNoiseCache::new(42, 64);
        let mut b = GumbelNoiseCache::new(42, 64);
        for _ in 0..200 {
            assert_eq!(
                sample_without_replacement(&cands, 3, &mut a),
                sample_without_replacement(&cands, 3, &mut b)
            );
        }
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let cands: Vec<(TokenId, f64)> = (0..10).map(|t| (t, 1.0 + t as f64)).collect();
        let mut cache = GumbelNoiseCache::new(8, 256);
        for _ in 0..100 {
            let mut out = sample_without_replacement(&cands, 10, &mut cache);
            out.sort_unstable();
            assert_eq!(out, (0..10).collect::<Vec<_>>());
        }
    }
}
