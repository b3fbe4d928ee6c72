//! Multi-problem benchmark runs and the 625 to 80 tree optimization.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::engine::{DecodeMetrics, EngineConfig, EngineError, Session, TrajectoryResult};
use crate::model::TargetModel;
use crate::synthetic::Problem;
use crate::tree::{build_initial_tree, depth_histogram, prune_with_mapping, NodeId, NodeStats, TreeTopology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub engine: EngineConfig,
    pub trajectories: usize,
    pub seed: u64,
    /// Problems decoded concurrently (each in its own session).
    pub parallel_problems: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { engine: EngineConfig::default(), trajectories: 4, seed: 0, parallel_problems: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct ProblemRun {
    pub problem: usize,
    pub results: Vec<TrajectoryResult>,
    pub node_stats: Option<NodeStats>,
}

impl ProblemRun {
    pub fn metrics(&self) -> DecodeMetrics {
        DecodeMetrics::aggregate(self.results.iter().map(|r| &r.metrics))
    }
}

/// Runs every problem in a fresh session seeded by `(config.seed, problem index)`.
///
/// Output does not depend on `parallel_problems`: sessions never share state.
pub fn run_problems<M: TargetModel + Clone + Send + Sync>(
    problems: &[Problem<M>],
    topology: Arc<TreeTopology>,
    config: &BenchConfig,
) -> Result<Vec<ProblemRun>, EngineError> {
    let run_one = |problem: &Problem<M>| -> Result<ProblemRun, EngineError> {
        let seed = derive_seed(config.seed, problem.index as u64);
        let mut session = Session::new(problem.model.clone(), Arc::clone(&topology), config.engine.clone(), seed);
        let results = session.run_problem(&problem.prompt, config.trajectories)?;
        Ok(ProblemRun { problem: problem.index, results, node_stats: session.take_node_stats() })
    };
    let workers = config.parallel_problems.clamp(1, problems.len().max(1));
    if workers == 1 {
        return problems.iter().map(run_one).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ProblemRun, EngineError>>>> =
        Mutex::new((0..problems.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(problem) = problems.get(i) else { break };
                let out = run_one(problem);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(out);
            });
        }
    });
    slots.into_inner().unwrap_or_else(|e| e.into_inner()).into_iter().map(|s| s.expect("every problem ran")).collect()
}

/// Pooled metrics over all trajectories of all runs.
pub fn pooled_metrics(runs: &[ProblemRun]) -> DecodeMetrics {
    DecodeMetrics::aggregate(runs.iter().flat_map(|r| r.results.iter().map(|t| &t.metrics)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub bench: BenchConfig,
    /// Node budget of the pruned tree.
    pub k: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self { bench: BenchConfig { trajectories: 4, ..Default::default() }, k: 80 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub initial: TreeTopology,
    pub stats: NodeStats,
    pub tree: TreeTopology,
    /// Pruned node id to initial-tree node id.
    pub mapping: Vec<NodeId>,
    pub initial_histogram: Vec<usize>,
    pub histogram: Vec<usize>,
    pub measurement: DecodeMetrics,
}

/// Decodes `problems` on the 625-node initial tree, collecting per-node
/// acceptance counts, then prunes to the `k` best nodes.
pub fn optimize_tree<M: TargetModel + Clone + Send + Sync>(
    problems: &[Problem<M>],
    config: &OptimizeConfig,
) -> Result<OptimizeOutcome, EngineError> {
    if problems.is_empty() {
        return Err(EngineError::Config("tree optimization needs at least one measurement problem".into()));
    }
    let initial = build_initial_tree();
    let mut bench = config.bench.clone();
    bench.engine.collect_node_stats = true;
    let runs = run_problems(problems, Arc::new(initial.clone()), &bench)?;
    let mut stats = NodeStats::new(initial.len());
    for run in &runs {
        stats.absorb(run.node_stats.as_ref().expect("stats were collected"))?;
    }
    let (tree, mapping) = prune_with_mapping(&initial, &stats, config.k);
    Ok(OptimizeOutcome {
        initial_histogram: depth_histogram(&initial),
        histogram: depth_histogram(&tree),
        measurement: pooled_metrics(&runs),
        initial,
        stats,
        tree,
        mapping,
    })
}
