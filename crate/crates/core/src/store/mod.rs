//! Adaptive n-gram store with compressed next-token distributions.
//!
//! Four tables hold the last 1, 2, 3 and 4 context tokens as keys. Each value
//! is a [`CompressedDistribution`]: the top-10 (token, probability) pairs of
//! the running mean of every target distribution observed after that key.
//! A new observation is merged as `k/(k+1) * old + 1/(k+1) * new`, where
//! tokens missing from the stored entry count as zero, and the result is
//! truncated back to ten entries.

mod file;

use std::sync::atomic::{AtomicU64, Ordering};

use rustc_hash::FxHashMap;

use crate::model::{ranks_before, DenseDistribution};
use crate::TokenId;

pub use file::{export_store, import_store, StoreFileError, STORE_FORMAT, STORE_VERSION};

/// Longest context suffix used as a key.
pub const MAX_GRAM: usize = 4;
/// Number of (token, probability) pairs kept per key.
pub const STORE_TOP_K: usize = 10;

/// Estimated bytes for one stored (token, probability) pair.
pub const PAIR_BYTES: usize = std::mem::size_of::<(TokenId, f64)>();
/// Estimated fixed bytes per key: the key itself, the count and table slot.
pub const KEY_OVERHEAD_BYTES: usize =
    std::mem::size_of::<NGramKey>() + std::mem::size_of::<Slot>() + 2 * std::mem::size_of::<usize>();

/// The last `n` tokens of a context, `1 <= n <= 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NGramKey {
    len: u8,
    tokens: [TokenId; MAX_GRAM],
}

impl NGramKey {
    pub fn new(tokens: &[TokenId]) -> Option<Self> {
        if tokens.is_empty() || tokens.len() > MAX_GRAM {
            return None;
        }
        let mut buf = [0; MAX_GRAM];
        buf[..tokens.len()].copy_from_slice(tokens);
        Some(Self { len: tokens.len() as u8, tokens: buf })
    }

    /// Key made of the last `n` tokens of `context`.
    pub fn suffix(context: &[TokenId], n: usize) -> Option<Self> {
        (n <= context.len()).then(|| Self::new(&context[context.len() - n..])).flatten()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens[..self.len as usize]
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.len as usize
    }
}

/// Top-10 approximation of the mean next-token distribution after a key.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedDistribution {
    entries: Vec<(TokenId, f64)>,
    count: u64,
}

impl CompressedDistribution {
    /// First observation: the top-10 entries of `observed`, count 1.
    pub fn from_observation(observed: &DenseDistribution) -> Self {
        Self { entries: observed.top_k(STORE_TOP_K), count: 1 }
    }

    /// Rebuilds an entry from stored parts, validating every invariant.
    pub fn from_parts(mut entries: Vec<(TokenId, f64)>, count: u64) -> Result<Self, String> {
        if count == 0 {
            return Err("count must be positive".into());
        }
        if entries.len() > STORE_TOP_K {
            return Err(format!("{} entries exceed the limit of {STORE_TOP_K}", entries.len()));
        }
        if entries.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err("probabilities must be finite and non-negative".into());
        }
        let mass: f64 = entries.iter().map(|(_, p)| p).sum();
        if mass > 1.0 + 1e-9 {
            return Err(format!("stored mass {mass} exceeds 1"));
        }
        entries.sort_by(|a, b| canonical_order(*a, *b));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err("duplicate token ids".into());
        }
        Ok(Self { entries, count })
    }

    /// Weighted-average merge of one more observation, then top-10 truncation.
    pub fn merge(&mut self, observed: &DenseDistribution) {
        let k = self.count as f64;
        let old_weight = k / (k + 1.0);
        let new_weight = 1.0 / (k + 1.0);
        // Only tokens in the old entry or the observation's own top-10 can
        // reach the merged top-10.
        let fresh = observed.top_k(STORE_TOP_K);
        let mut merged: Vec<(TokenId, f64)> = Vec::with_capacity(self.entries.len() + fresh.len());
        for &(token, p) in &self.entries {
            merged.push((token, old_weight * p + new_weight * observed.prob(token)));
        }
        for &(token, p) in &fresh {
            if !self.entries.iter().any(|(t, _)| *t == token) {
                merged.push((token, new_weight * p));
            }
        }
        merged.retain(|(_, p)| *p > 0.0);
        merged.sort_by(|a, b| canonical_order(*a, *b));
        merged.truncate(STORE_TOP_K);
        self.entries = merged;
        self.count += 1;
    }

    /// Entries sorted by descending probability, ties by ascending token id.
    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Total stored probability mass (coverage of the full distribution).
    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.entries.iter().find(|(t, _)| *t == token).map_or(0.0, |(_, p)| *p)
    }
}

fn canonical_order(a: (TokenId, f64), b: (TokenId, f64)) -> std::cmp::Ordering {
    if ranks_before(a.1, a.0, b) {
        std::cmp::Ordering::Less
    } else if ranks_before(b.1, b.0, a) {
        std::cmp::Ordering::Greater
    } else {
        std::cmp::Ordering::Equal
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StoreConfig {
    /// Optional per-table key cap; the least recently updated key is evicted.
    pub capacity_per_table: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    dist: CompressedDistribution,
    last_update: u64,
}

/// Successful lookup: the matched gram length and its stored entry.
#[derive(Clone, Copy, Debug)]
pub struct StoreHit<'a> {
    pub level: usize,
    pub dist: &'a CompressedDistribution,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    /// Keys per table, index `n - 1` for gram length `n`.
    pub entries_per_level: [usize; MAX_GRAM],
    pub total_entries: usize,
    pub stored_pairs: usize,
    pub memory_bytes_estimate: usize,
    pub hits: u64,
    pub misses: u64,
}

/// Four-level n-gram store. Single writer, many concurrent readers.
#[derive(Debug)]
pub struct NGramStore {
    vocab_size: usize,
    config: StoreConfig,
    tables: [FxHashMap<NGramKey, Slot>; MAX_GRAM],
    clock: u64,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Clone for NGramStore {
    fn clone(&self) -> Self {
        Self {
            vocab_size: self.vocab_size,
            config: self.config,
            tables: self.tables.clone(),
            clock: self.clock,
            hits: AtomicU64::new(self.hits.load(Ordering::Relaxed)),
            misses: AtomicU64::new(self.misses.load(Ordering::Relaxed)),
        }
    }
}

impl NGramStore {
    pub fn new(vocab_size: usize) -> Self {
        Self::with_config(vocab_size, StoreConfig::default())
    }

    pub fn with_config(vocab_size: usize, config: StoreConfig) -> Self {
        Self {
            vocab_size,
            config,
            tables: Default::default(),
            clock: 0,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn config(&self) -> StoreConfig {
        self.config
    }

    pub fn is_empty(&self) -> bool {
        self.tables.iter().all(|t| t.is_empty())
    }

    /// Drops every entry and resets the counters.
    pub fn clear(&mut self) {
        self.tables.iter_mut().for_each(|t| t.clear());
        self.clock = 0;
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
    }

    /// Records that `observed` was the target distribution after `context`,
    /// under every key length the context supports.
    pub fn update(&mut self, context: &[TokenId], observed: &DenseDistribution) {
        debug_assert_eq!(observed.vocab_size(), self.vocab_size);
        self.clock += 1;
        for n in 1..=MAX_GRAM.min(context.len()) {
            let key = NGramKey::suffix(context, n).expect("n <= context length");
            let clock = self.clock;
            let table = &mut self.tables[n - 1];
            match table.get_mut(&key) {
                Some(slot) => {
                    slot.dist.merge(observed);
                    slot.last_update = clock;
                }
                None => {
                    if let Some(cap) = self.config.capacity_per_table {
                        if table.len() >= cap.max(1) {
                            evict_oldest(table);
                        }
                    }
                    table.insert(key, Slot { dist: CompressedDistribution::from_observation(observed), last_update: clock });
                }
            }
        }
    }

    /// Longest-suffix lookup: tries the 4-gram key first, down to the unigram.
    pub fn lookup(&self, context: &[TokenId]) -> Option<StoreHit<'_>> {
        for n in (1..=MAX_GRAM.min(context.len())).rev() {
            let key = NGramKey::suffix(context, n).expect("n <= context length");
            if let Some(slot) = self.tables[n - 1].get(&key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Some(StoreHit { level: n, dist: &slot.dist });
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        None
    }

    /// Exact-key access without touching the hit/miss counters.
    pub fn get(&self, key: &NGramKey) -> Option<&CompressedDistribution> {
        self.tables[key.len() - 1].get(key).map(|s| &s.dist)
    }

    /// All entries of table `n`, sorted by key.
    pub fn entries(&self, n: usize) -> Vec<(NGramKey, &CompressedDistribution)> {
        let mut out: Vec<_> = self.tables[n - 1].iter().map(|(k, s)| (*k, &s.dist)).collect();
        out.sort_by_key(|(key, _)| *key);
        out
    }

    /// Inserts an entry verbatim (used when loading a persisted store).
    pub fn insert(&mut self, key: NGramKey, dist: CompressedDistribution) {
        self.clock += 1;
        self.tables[key.len() - 1].insert(key, Slot { dist, last_update: self.clock });
    }

    pub fn snapshot_stats(&self) -> StoreStats {
        let mut stats = StoreStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            ..Default::default()
        };
        for (i, table) in self.tables.iter().enumerate() {
            stats.entries_per_level[i] = table.len();
            stats.total_entries += table.len();
            for slot in table.values() {
                stats.stored_pairs += slot.dist.entries.len();
            }
        }
        stats.memory_bytes_estimate = stats.total_entries * KEY_OVERHEAD_BYTES + stats.stored_pairs * PAIR_BYTES;
        stats
    }
}

fn evict_oldest(table: &mut FxHashMap<NGramKey, Slot>) {
    if let Some(key) = table.iter().min_by_key(|(k, s)| (s.last_update, **k)).map(|(k, _)| *k) {
        table.remove(&key);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(vocab: usize, entries: &[(TokenId, f64)]) -> DenseDistribution {
        let mut probs = vec![0.0; vocab];
        for &(t, p) in entries {
            probs[t as usize] = p;
        }
        DenseDistribution::new(probs).unwrap()
    }

    #[test]
    fn first_observation_is_stored_verbatim() {
        let mut store = NGramStore::new(16);
        store.update(&[5], &dist(16, &[(3, 0.7), (9, 0.3)]));
        let entry = store.lookup(&[5]).unwrap().dist;
        assert_eq!(entry.entries(), &[(3, 0.7), (9, 0.3)]);
        assert_eq!(entry.count(), 1);
    }

    #[test]
    fn weighted_merge_matches_hand_arithmetic() {
        let mut entry = CompressedDistribution::from_parts(vec![(3, 0.6), (9, 0.4)], 2).unwrap();
        entry.merge(&dist(16, &[(3, 0.3), (2, 0.7)]));
        assert_eq!(entry.count(), 3);
        let expected = [(3, 0.5), (9, 0.4 * 2.0 / 3.0), (2, 0.7 / 3.0)];
        assert_eq!(entry.entries().len(), 3);
        for ((t, p), (et, ep)) in entry.entries().iter().zip(expected) {
            assert_eq!(*t, et);
            assert!((p - ep).abs() < 1e-12, "{t}: {p} vs {ep}");
        }
    }

    #[test]
    fn merge_truncates_to_ten_entries() {
        let mut entry = CompressedDistribution::from_observation(&DenseDistribution::uniform(12));
        assert_eq!(entry.entries().len(), 10);
        entry.merge(&dist(12, &[(10, 0.5), (11, 0.5)]));
        assert_eq!(entry.entries().len(), 10);
        assert_eq!(entry.entries()[0].0, 10);
        assert_eq!(entry.entries()[1].0, 11);
        assert!(entry.mass() <= 1.0 + 1e-12);
    }

    #[test]
    fn ties_break_by_ascending_token_id() {
        let entry = CompressedDistribution::from_observation(&DenseDistribution::uniform(20));
        let ids: Vec<TokenId> = entry.entries().iter().map(|(t, _)| *t).collect();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn lookup_prefers_the_longest_key() {
        let mut store = NGramStore::new(8);
        store.update(&[1, 2, 3, 4], &DenseDistribution::one_hot(8, 7));
        store.update(&[4], &DenseDistribution::one_hot(8, 6));
        let hit = store.lookup(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(hit.level, 4);
        assert_eq!(hit.dist.entries(), &[(7, 1.0)]);
        let hit = store.lookup(&[5, 5, 5, 4]).unwrap();
        assert_eq!(hit.level, 1);
        assert_eq!(hit.dist.count(), 2);
    }

    #[test]
    fn empty_store_misses() {
        let store = NGramStore::new(8);
        assert!(store.lookup(&[1, 2]).is_none());
        let stats = store.snapshot_stats();
        assert_eq!(stats.entries_per_level, [0; 4]);
        assert_eq!(stats.total_entries, 0);
        assert_eq!(stats.memory_bytes_estimate, 0);
        assert_eq!(stats.misses, 1);
    }

    #[test]
    fn one_update_creates_one_key_per_level() {
        let mut store = NGramStore::new(8);
        store.update(&[1, 2, 3, 4], &DenseDistribution::uniform(8));
        let stats = store.snapshot_stats();
        assert_eq!(stats.entries_per_level, [1, 1, 1, 1]);
        store.update(&[0, 1], &DenseDistribution::uniform(8));
        assert_eq!(store.snapshot_stats().entries_per_level, [2, 2, 1, 1]);
    }

    #[test]
    fn memory_estimate_is_bounded_by_update_count() {
        let mut store = NGramStore::new(64);
        let n = 500;
        for i in 0..n {
            let ctx: Vec<TokenId> = (0..6).map(|j| ((i * 7 + j * 13) % 64) as TokenId).collect();
            store.update(&ctx, &DenseDistribution::uniform(64));
        }
        let stats = store.snapshot_stats();
        assert!(stats.stored_pairs <= n * 4 * STORE_TOP_K);
        assert!(stats.memory_bytes_estimate <= n * 4 * (STORE_TOP_K * PAIR_BYTES + KEY_OVERHEAD_BYTES));
        assert_eq!(stats.stored_pairs, stats.total_entries * STORE_TOP_K);
    }

    #[test]
    fn capacity_evicts_least_recently_updated() {
        let mut store = NGramStore::with_config(8, StoreConfig { capacity_per_table: Some(2) });
        let d = DenseDistribution::uniform(8);
        store.update(&[1], &d);
        store.update(&[2], &d);
        store.update(&[1], &d);
        store.update(&[3], &d);
        assert!(store.get(&NGramKey::new(&[2]).unwrap()).is_none());
        assert!(store.get(&NGramKey::new(&[1]).unwrap()).is_some());
        assert!(store.get(&NGramKey::new(&[3]).unwrap()).is_some());
    }

    #[test]
    fn from_parts_rejects_invalid_entries() {
        assert!(CompressedDistribution::from_parts(vec![(1, 0.5)], 0).is_err());
        assert!(CompressedDistribution::from_parts(vec![(1, 0.5), (1, 0.2)], 1).is_err());
        assert!(CompressedDistribution::from_parts(vec![(1, 0.8), (2, 0.8)], 1).is_err());
        assert!(CompressedDistribution::from_parts((0..11).map(|t| (t, 0.01)).collect(), 1).is_err());
    }

    proptest! {
        #[test]
        fn lookup_returns_only_suffix_keys(
            updates in prop::collection::vec(prop::collection::vec(0u32..4, 1..7), 1..30),
            query in prop::collection::vec(0u32..4, 1..7),
        ) {
            let mut store = NGramStore::new(4);
            for ctx in &updates {
                store.update(ctx, &DenseDistribution::one_hot(4, ctx[0]));
            }
            if let Some(hit) = store.lookup(&query) {
                let key = NGramKey::suffix(&query, hit.level).unwrap();
                prop_assert!(store.get(&key).is_some());
                for longer in hit.level + 1..=MAX_GRAM.min(query.len()) {
                    prop_assert!(store.get(&NGramKey::suffix(&query, longer).unwrap()).is_none());
                }
            }
        }

        #[test]
        fn entries_never_exceed_ten_and_count_tracks_updates(
            observations in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 32), 1..40),
        ) {
            let mut entry: Option<CompressedDistribution> = None;
            for (i, weights) in observations.iter().enumerate() {
                let d = DenseDistribution::from_weights(weights.iter().map(|w| w + 1e-3).collect()).unwrap();
                match entry.as_mut() {
                    Some(e) => e.merge(&d),
                    None => entry = Some(CompressedDistribution::from_observation(&d)),
                }
                let e = entry.as_ref().unwrap();
                prop_assert!(e.entries().len() <= STORE_TOP_K);
                prop_assert_eq!(e.count(), i as u64 + 1);
                prop_assert!(e.mass() <= 1.0 + 1e-9);
            }
        }
    }
}
