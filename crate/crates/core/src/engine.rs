//! The decode loop: draft, verify, commit, update the store.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drafter::{build_draft, DraftMode};
use crate::gumbel::{GumbelNoiseCache, DEFAULT_REFILL_SIZE};
use crate::model::{ModelError, TargetModel};
use crate::store::NGramStore;
use crate::tree::{NodeStats, TreeError, TreeTopology};
use crate::verifier::{verify_tree, VerifyError};
use crate::TokenId;

pub const METRICS_FORMAT: &str = "stand-metrics";
pub const METRICS_VERSION: u32 = 1;

/// Mixed into the session seed to give the noise cache its own stream.
const NOISE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{0}")]
    Config(String),
}

/// Which decodes share one n-gram store.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreScope {
    /// Fresh store for every trajectory.
    PerTrajectory,
    /// One store per problem, shared by its trajectories.
    #[default]
    PerProblem,
    /// Never reset.
    Global,
}

impl StoreScope {
    pub fn as_str(self) -> &'static str {
        match self {
            StoreScope::PerTrajectory => "per_trajectory",
            StoreScope::PerProblem => "per_problem",
            StoreScope::Global => "global",
        }
    }
}

impl fmt::Display for StoreScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StoreScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "per_trajectory" => Ok(StoreScope::PerTrajectory),
            "per_problem" => Ok(StoreScope::PerProblem),
            "global" => Ok(StoreScope::Global),
            other => Err(format!("unknown store scope {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: DraftMode,
    pub scope: StoreScope,
    pub max_tokens: usize,
    pub stop_tokens: Vec<TokenId>,
    /// Seed the store from the target's distributions over prompt prefixes.
    pub prefill_seeding: bool,
    pub noise_refill_size: usize,
    /// Record per-node acceptance statistics (tree optimization).
    pub collect_node_stats: bool,
    /// Measure wall time; when off `wall_ms` is reported as 0.
    pub wall_clock: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: DraftMode::Stochastic,
            scope: StoreScope::PerProblem,
            max_tokens: 256,
            stop_tokens: Vec::new(),
            prefill_seeding: true,
            noise_refill_size: DEFAULT_REFILL_SIZE,
            collect_node_stats: false,
            wall_clock: true,
        }
    }
}

/// Bookkeeping for one draft/verify round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// Draft nodes filled this round.
    pub filled: usize,
    /// Draft tokens accepted by verification.
    pub accepted: usize,
    /// Tokens committed (accepted + bonus, after stop/length truncation).
    pub emitted: usize,
    /// Positions a tree-parallel target pass scores: `filled + 1`.
    pub target_positions: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub tokens: u64,
    pub rounds: u64,
    /// Mean acceptance length `A = tokens / rounds` (1.0 when no rounds ran).
    pub accept_len_mean: f64,
    pub target_positions: u64,
    /// Target calls actually issued (lazy walk of the accepted path).
    pub target_evaluations: u64,
    pub wall_ms: f64,
    /// Tokens per second of decode wall time (0 when wall time is not measured).
    pub throughput_tps: f64,
    pub positions_per_token: f64,
    /// Target round trips per token when each round costs one batched pass.
    pub rounds_per_token: f64,
}

impl DecodeMetrics {
    fn finish(tokens: u64, rounds: u64, positions: u64, evaluations: u64, wall_ms: f64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            tokens,
            rounds,
            accept_len_mean: if rounds == 0 { 1.0 } else { ratio(tokens, rounds) },
            target_positions: positions,
            target_evaluations: evaluations,
            wall_ms,
            throughput_tps: if wall_ms > 0.0 { tokens as f64 / (wall_ms / 1000.0) } else { 0.0 },
            positions_per_token: ratio(positions, tokens),
            rounds_per_token: ratio(rounds, tokens),
        }
    }

    /// Pools several runs: sums counts and wall time, recomputes the ratios.
    pub fn aggregate<'a, I: IntoIterator<Item = &'a DecodeMetrics>>(parts: I) -> Self {
        let (mut t, mut r, mut p, mut e, mut w) = (0, 0, 0, 0, 0.0);
        for m in parts {
            t += m.tokens;
            r += m.rounds;
            p += m.target_positions;
            e += m.target_evaluations;
            w += m.wall_ms;
        }
        Self::finish(t, r, p, e, w)
    }
}

/// Metrics from per-round traces: `A = Σ emitted / rounds`,
/// positions `= Σ (filled + 1)`.
pub fn compute_metrics(traces: &[RoundTrace], target_evaluations: u64, wall_ms: f64) -> DecodeMetrics {
    let tokens = traces.iter().map(|t| t.emitted as u64).sum();
    let positions = traces.iter().map(|t| t.target_positions as u64).sum();
    DecodeMetrics::finish(tokens, traces.len() as u64, positions, target_evaluations, wall_ms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    /// Generated tokens (prompt excluded).
    pub tokens: Vec<TokenId>,
    pub rounds: Vec<RoundTrace>,
    pub metrics: DecodeMetrics,
    /// True when generation ended on a stop token.
    pub stopped: bool,
}

/// One decoding context: target, topology, store and random streams.
///
/// All randomness comes from the session seed: verification draws from a
/// ChaCha8 stream and drafting from a Gumbel noise cache seeded off the same
/// seed, so `(seed, config, prompts)` determines every output.
pub struct Session<M: TargetModel> {
    target: M,
    topology: Arc<TreeTopology>,
    store: NGramStore,
    config: EngineConfig,
    rng: ChaCha8Rng,
    noise: GumbelNoiseCache,
    node_stats: Option<NodeStats>,
}

impl<M: TargetModel> Session<M> {
    pub fn new(target: M, topology: Arc<TreeTopology>, config: EngineConfig, seed: u64) -> Self {
        let store = NGramStore::new(target.vocab_size());
        let node_stats = config.collect_node_stats.then(|| NodeStats::new(topology.len()));
        Self {
            noise: GumbelNoiseCache::new(seed ^ NOISE_STREAM, config.noise_refill_size),
            rng: ChaCha8Rng::seed_from_u64(seed),
            target,
            topology,
            store,
            config,
            node_stats,
        }
    }

    /// Starts from an existing store (e.g. a loaded snapshot) instead of an empty one.
    pub fn with_store(mut self, store: NGramStore) -> Self {
        self.store = store;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn target(&self) -> &M {
        &self.target
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn store(&self) -> &NGramStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut NGramStore {
        &mut self.store
    }

    pub fn into_store(self) -> NGramStore {
        self.store
    }

    pub fn node_stats(&self) -> Option<&NodeStats> {
        self.node_stats.as_ref()
    }

    pub fn take_node_stats(&mut self) -> Option<NodeStats> {
        let fresh = self.config.collect_node_stats.then(|| NodeStats::new(self.topology.len()));
        std::mem::replace(&mut self.node_stats, fresh)
    }

    /// Decodes one trajectory after `prompt`.
    ///
    /// Each round drafts from the store, verifies against the target, commits
    /// the accepted tokens plus the bonus token (cut at a stop token or the
    /// length budget) and then feeds the target distributions seen at the
    /// committed positions back into the store.
    pub fn decode_trajectory(&mut self, prompt: &[TokenId]) -> Result<TrajectoryResult, EngineError> {
        if self.config.scope == StoreScope::PerTrajectory {
            self.store.clear();
        }
        let start = self.config.wall_clock.then(Instant::now);
        let mut ctx = prompt.to_vec();
        if self.config.prefill_seeding && self.config.max_tokens > 0 {
            for i in 1..prompt.len() {
                let p = self.target.next_distribution(&prompt[..i])?;
                self.store.update(&prompt[..i], &p);
            }
        }
        let mut rounds = Vec::new();
        let mut evaluations = 0u64;
        let mut stopped = false;
        while ctx.len() - prompt.len() < self.config.max_tokens && !stopped {
            let draft = build_draft(&ctx, &self.topology, &self.store, &mut self.noise, self.config.mode);
            let outcome = verify_tree(&ctx, &draft, &self.topology, &self.target, &mut self.rng)?;
            evaluations += outcome.target_evaluations as u64;
            let budget = self.config.max_tokens - (ctx.len() - prompt.len());
            let mut emitted = outcome.emitted();
            if let Some(stop) = emitted.iter().position(|t| self.config.stop_tokens.contains(t)) {
                emitted.truncate(stop + 1);
                stopped = true;
            }
            emitted.truncate(budget);
            let base = ctx.len();
            ctx.extend_from_slice(&emitted);
            for (i, p) in outcome.distributions.iter().take(emitted.len()).enumerate() {
                self.store.update(&ctx[..base + i], p);
            }
            if let Some(stats) = self.node_stats.as_mut() {
                let committed = &outcome.accepted_nodes[..outcome.accepted_nodes.len().min(emitted.len())];
                let drafted: Vec<_> = draft.filled_nodes().collect();
                stats.record_acceptance(&self.topology, committed, &drafted)?;
            }
            rounds.push(RoundTrace {
                filled: draft.filled_count(),
                accepted: outcome.accepted_tokens.len(),
                emitted: emitted.len(),
                target_positions: outcome.target_positions,
            });
        }
        let wall_ms = start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1000.0);
        let metrics = compute_metrics(&rounds, evaluations, wall_ms);
        Ok(TrajectoryResult { tokens: ctx.split_off(prompt.len()), rounds, metrics, stopped })
    }

    /// Runs `n_trajectories` decodes of one problem in sequence, resetting
    /// the store first under [`StoreScope::PerProblem`].
    pub fn run_problem(&mut self, prompt: &[TokenId], n_trajectories: usize) -> Result<Vec<TrajectoryResult>, EngineError> {
        if n_trajectories == 0 {
            return Err(EngineError::Config("n_trajectories must be at least 1".into()));
        }
        if self.config.scope == StoreScope::PerProblem {
            self.store.clear();
        }
        (0..n_trajectories).map(|_| self.decode_trajectory(prompt)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub problem: usize,
    pub trajectory: usize,
    pub mode: DraftMode,
    #[serde(flatten)]
    pub metrics: DecodeMetrics,
}

/// Machine-readable decode report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub tokens: u64,
    pub rounds: u64,
    pub accept_len_mean: f64,
    pub target_positions: u64,
    pub wall_ms: f64,
    pub positions_per_token: f64,
    pub rounds_per_token: f64,
    pub throughput_tps: f64,
    /// Pooled metrics per draft mode when several modes were run.
    pub per_mode: Vec<(DraftMode, DecodeMetrics)>,
    pub per_trajectory: Vec<TrajectoryReport>,
}

impl MetricsReport {
    pub fn new(per_trajectory: Vec<TrajectoryReport>) -> Self {
        let total = DecodeMetrics::aggregate(per_trajectory.iter().map(|t| &t.metrics));
        let mut modes: Vec<DraftMode> = per_trajectory.iter().map(|t| t.mode).collect();
        modes.dedup();
        modes.sort_by_key(|m| m.as_str());
        modes.dedup();
        let per_mode = modes
            .into_iter()
            .map(|mode| (mode, DecodeMetrics::aggregate(per_trajectory.iter().filter(|t| t.mode == mode).map(|t| &t.metrics))))
            .collect();
        Self {
            format: METRICS_FORMAT.into(),
            version: METRICS_VERSION,
            tokens: total.tokens,
            rounds: total.rounds,
            accept_len_mean: total.accept_len_mean,
            target_positions: total.target_positions,
            wall_ms: total.wall_ms,
            positions_per_token: total.positions_per_token,
            rounds_per_token: total.rounds_per_token,
            throughput_tps: total.throughput_tps,
            per_mode,
            per_trajectory,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per trajectory.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "problem,trajectory,mode,tokens,rounds,accept_len_mean,target_positions,positions_per_token,rounds_per_token,wall_ms\n",
        );
        for t in &self.per_trajectory {
            let m = &t.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                t.problem,
                t.trajectory,
                t.mode,
                m.tokens,
                m.rounds,
                m.accept_len_mean,
                m.target_positions,
                m.positions_per_token,
                m.rounds_per_token,
                m.wall_ms
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenseDistribution;
    use crate::tree::{build_heuristic_tree, TreeTopology};

    /// Repeats a fixed phrase forever: the next token is determined by position.
    struct Phrase(Vec<TokenId>);

    impl TargetModel for Phrase {
        fn vocab_size(&self) -> usize {
            64
        }
        fn next_distribution(&self, ctx: &[TokenId]) -> Result<DenseDistribution, ModelError> {
            Ok(DenseDistribution::one_hot(64, self.0[ctx.len() % self.0.len()]))
        }
    }

    struct Uniform;

    impl TargetModel for Uniform {
        fn vocab_size(&self) -> usize {
            32
        }
        fn next_distribution(&self, _: &[TokenId]) -> Result<DenseDistribution, ModelError> {
            Ok(DenseDistribution::uniform(32))
        }
    }

    struct WideUniform;

    impl TargetModel for WideUniform {
        fn vocab_size(&self) -> usize {
            1000
        }
        fn next_distribution(&self, _: &[TokenId]) -> Result<DenseDistribution, ModelError> {
            Ok(DenseDistribution::uniform(1000))
        }
    }

    fn phrase() -> Vec<TokenId> {
        // 64 distinct tokens in a scrambled order.
        (0..64).map(|i| (i * 37 + 11) % 64).collect()
    }

    #[test]
    fn metrics_examples() {
        let traces: Vec<RoundTrace> = [4, 3, 3, 3, 3, 3, 3, 4, 3, 3]
            .iter()
            .map(|&e| RoundTrace { filled: 5, accepted: e - 1, emitted: e, target_positions: 6 })
            .collect();
        let m = compute_metrics(&traces, 0, 0.0);
        assert_eq!(m.tokens, 32);
        assert!((m.accept_len_mean - 3.2).abs() < 1e-12);
        assert_eq!(m.target_positions, 60);
        let plain: Vec<RoundTrace> = (0..100).map(|_| RoundTrace { filled: 0, accepted: 0, emitted: 1, target_positions: 1 }).collect();
        let m = compute_metrics(&plain, 100, 0.0);
        assert_eq!((m.accept_len_mean, m.positions_per_token), (1.0, 1.0));
    }

    #[test]
    fn repeated_phrase_is_drafted_after_first_pass() {
        let config = EngineConfig { max_tokens: 64 * 4, wall_clock: false, ..Default::default() };
        let mut session = Session::new(Phrase(phrase()), Arc::new(build_heuristic_tree()), config, 3);
        let result = session.decode_trajectory(&[phrase()[0]]).unwrap();
        assert_eq!(result.tokens.len(), 256);
        // After the first repetition every lookup hits the right continuation.
        let mut emitted = 0;
        let mut tail_rounds = Vec::new();
        for r in &result.rounds {
            if emitted >= 64 {
                tail_rounds.push(*r);
            }
            emitted += r.emitted;
        }
        let tail = compute_metrics(&tail_rounds, 0, 0.0);
        assert!(tail.accept_len_mean > 2.0, "A = {}", tail.accept_len_mean);
    }

    #[test]
    fn cold_store_on_uniform_target_is_plain_sampling() {
        let config = EngineConfig { max_tokens: 200, scope: StoreScope::PerTrajectory, prefill_seeding: false, wall_clock: false, ..Default::default() };
        let mut session = Session::new(WideUniform, Arc::new(TreeTopology::chain(1)), config, 9);
        let r = session.decode_trajectory(&[1]).unwrap();
        assert_eq!(r.tokens.len(), 200);
        assert!(r.metrics.accept_len_mean < 1.05, "{}", r.metrics.accept_len_mean);
    }

    #[test]
    fn fixed_seed_replays_exactly() {
        let run = |seed| {
            let config = EngineConfig { max_tokens: 100, wall_clock: false, ..Default::default() };
            let mut s = Session::new(Uniform, Arc::new(build_heuristic_tree()), config, seed);
            s.run_problem(&[1, 2], 3).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn stop_token_is_emitted_then_halts() {
        let config = EngineConfig { max_tokens: 500, stop_tokens: vec![phrase()[10]], wall_clock: false, ..Default::default() };
        let mut s = Session::new(Phrase(phrase()), Arc::new(build_heuristic_tree()), config, 1);
        let r = s.decode_trajectory(&[phrase()[0]]).unwrap();
        assert!(r.stopped);
        assert_eq!(*r.tokens.last().unwrap(), phrase()[10]);
        assert_eq!(r.tokens.len(), 10);
    }

    #[test]
    fn zero_budget_gives_empty_result() {
        let config = EngineConfig { max_tokens: 0, ..Default::default() };
        let mut s = Session::new(Uniform, Arc::new(build_heuristic_tree()), config, 1);
        let r = s.decode_trajectory(&[1]).unwrap();
        assert!(r.tokens.is_empty() && r.rounds.is_empty());
    }

    #[test]
    fn trace_identities_hold() {
        let config = EngineConfig { max_tokens: 300, collect_node_stats: true, wall_clock: false, ..Default::default() };
        let topo = Arc::new(build_heuristic_tree());
        let mut s = Session::new(Phrase(phrase()), topo.clone(), config, 2);
        let results = s.run_problem(&[phrase()[0]], 2).unwrap();
        for r in &results {
            let tokens: usize = r.rounds.iter().map(|t| t.emitted).sum();
            let positions: usize = r.rounds.iter().map(|t| t.filled + 1).sum();
            assert_eq!(tokens, r.tokens.len());
            assert_eq!(positions as u64, r.metrics.target_positions);
            assert!(r.rounds.iter().all(|t| t.emitted >= 1 && t.emitted <= topo.max_depth() + 1));
        }
        assert!(s.node_stats().unwrap().is_prefix_closed(&topo));
    }

    #[test]
    fn scopes_control_store_reset() {
        let topo = Arc::new(build_heuristic_tree());
        let sizes = |scope| {
            let config = EngineConfig { max_tokens: 30, scope, wall_clock: false, ..Default::default() };
            let mut s = Session::new(Uniform, topo.clone(), config, 4);
            let mut sizes = Vec::new();
            for _ in 0..2 {
                s.run_problem(&[1], 2).unwrap();
                sizes.push(s.store().snapshot_stats().total_entries);
            }
            sizes
        };
        let global = sizes(StoreScope::Global);
        assert!(global[1] > global[0]);
        let per_problem = sizes(StoreScope::PerProblem);
        assert!(per_problem[1] <= global[1]);
    }

    #[test]
    fn report_json_has_expected_keys() {
        let config = EngineConfig { max_tokens: 20, wall_clock: false, ..Default::default() };
        let mut s = Session::new(Uniform, Arc::new(build_heuristic_tree()), config, 1);
        let results = s.run_problem(&[1], 2).unwrap();
        let rows = results
            .into_iter()
            .enumerate()
            .map(|(i, r)| TrajectoryReport { problem: 0, trajectory: i, mode: DraftMode::Stochastic, metrics: r.metrics })
            .collect();
        let report = MetricsReport::new(rows);
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        for key in ["tokens", "rounds", "accept_len_mean", "target_positions", "wall_ms", "per_trajectory"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(report.tokens, 40);
        assert_eq!(report.to_csv().lines().count(), 3);
    }
}
