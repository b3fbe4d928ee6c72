use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stand_core::analysis::{
    acceptance_probe, overlap_report, read_trajectories, sample_contexts, write_trajectories, AnalysisError,
    TrajectoryFileHeader, PROBE_WIDTH,
};
use stand_core::engine::{EngineError, MetricsReport, TrajectoryReport};
use stand_core::model::TargetModel;
use stand_core::optimize::{optimize_tree, pooled_metrics, run_problems, BenchConfig, OptimizeConfig};
use stand_core::store::{export_store, import_store, StoreFileError};
use stand_core::synthetic::TaskFamily;
use stand_core::tree::{stats_to_json, tree_to_json};
use stand_core::{derive_seed, DraftMode, NGramStore, Session, TokenId};

use crate::config::RunArgs;
use crate::source::{load_problems, load_target, load_topology, ProblemSet};
use crate::UsageError;

pub const PROBE_FORMAT: &str = "stand-probe";
pub const PROBE_VERSION: u32 = 1;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Engine configuration problems are the caller's fault; everything else is a runtime failure.
fn engine_err(e: EngineError) -> anyhow::Error {
    match e {
        EngineError::Config(msg) => usage(msg),
        e => anyhow::Error::new(e).context("decode failed"),
    }
}

struct Outputs(PathBuf);

impl Outputs {
    fn create(args: &RunArgs) -> anyhow::Result<Self> {
        let dir = args.output_dir();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self(dir))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> anyhow::Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn writer(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.path(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }
}

fn nonempty(set: &ProblemSet) -> anyhow::Result<()> {
    if set.problems.is_empty() {
        return Err(usage("the problem set is empty"));
    }
    Ok(())
}

fn bench(args: &RunArgs, set: &ProblemSet, mode: DraftMode) -> BenchConfig {
    BenchConfig {
        engine: args.engine(mode, set.default_max_tokens),
        trajectories: args.trajectories(),
        seed: args.seed(),
        parallel_problems: args.parallel_problems.unwrap_or(1),
    }
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    problem: usize,
    trajectory: usize,
    mode: DraftMode,
    prompt: &'a [TokenId],
    tokens: &'a [TokenId],
}

pub fn decode(args: &RunArgs) -> anyhow::Result<()> {
    let set = load_problems(args, 1)?;
    nonempty(&set)?;
    let topology = Arc::new(load_topology(args.topology())?);
    let out = Outputs::create(args)?;
    let mut rows = Vec::new();
    for mode in args.modes() {
        let runs = run_problems(&set.problems, Arc::clone(&topology), &bench(args, &set, mode)).map_err(engine_err)?;
        let name = format!("trajectories-{mode}.jsonl");
        let mut w = out.writer(&name)?;
        writeln!(w, "{}", serde_json::to_string(&TrajectoryFileHeader::default())?)?;
        for (run, problem) in runs.iter().zip(&set.problems) {
            for (i, r) in run.results.iter().enumerate() {
                let record =
                    TrajectoryRecord { problem: run.problem, trajectory: i, mode, prompt: &problem.prompt, tokens: &r.tokens };
                writeln!(w, "{}", serde_json::to_string(&record)?)?;
                rows.push(TrajectoryReport { problem: run.problem, trajectory: i, mode, metrics: r.metrics.clone() });
            }
        }
        w.flush().with_context(|| format!("writing {name}"))?;
        let m = pooled_metrics(&runs);
        println!(
            "{mode}: {} problems, {} tokens in {} rounds, mean acceptance length {:.3}, target positions/token {:.3}",
            runs.len(),
            m.tokens,
            m.rounds,
            m.accept_len_mean,
            m.positions_per_token
        );
    }
    let report = MetricsReport::new(rows);
    out.write("metrics.json", &report.to_json())?;
    out.write("metrics.csv", &report.to_csv())?;
    println!("wrote {}", out.0.display());
    Ok(())
}

pub fn tree_optimize(args: &RunArgs) -> anyhow::Result<()> {
    let set = load_problems(args, 30)?;
    nonempty(&set)?;
    let mode = *args.modes().first().expect("at least one mode");
    let config = OptimizeConfig { bench: bench(args, &set, mode), k: args.k.unwrap_or(80) };
    let outcome = optimize_tree(&set.problems, &config).map_err(engine_err)?;
    let out = Outputs::create(args)?;
    out.write("tree.json", &tree_to_json(&outcome.tree))?;
    out.write("initial-tree.json", &tree_to_json(&outcome.initial))?;
    out.write("stats.json", &stats_to_json(&outcome.stats))?;
    let depth = outcome.initial_histogram.len().max(outcome.histogram.len());
    let mut csv = String::from("depth,initial,optimized\n");
    for d in 0..depth {
        let at = |h: &[usize]| h.get(d).copied().unwrap_or(0);
        csv.push_str(&format!("{},{},{}\n", d + 1, at(&outcome.initial_histogram), at(&outcome.histogram)));
    }
    out.write("histogram.csv", &csv)?;
    println!(
        "measured {} problems: mean acceptance length {:.3} on the {}-node initial tree",
        set.problems.len(),
        outcome.measurement.accept_len_mean,
        outcome.initial.len()
    );
    println!(
        "pruned to {} nodes, depth {}, stats prefix-closed: {}",
        outcome.tree.len(),
        outcome.tree.max_depth(),
        outcome.stats.is_prefix_closed(&outcome.initial)
    );
    println!("per-depth nodes: {:?}", outcome.histogram);
    println!("wrote {}", out.0.display());
    Ok(())
}

pub fn overlap(args: &RunArgs, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let mut trajectories = Vec::new();
    for path in inputs {
        let file = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
        let mut read = read_trajectories(BufReader::new(file)).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        trajectories.append(&mut read);
    }
    if trajectories.is_empty() {
        return Err(usage("no trajectories in the input"));
    }
    let report = overlap_report(&trajectories);
    let out = Outputs::create(args)?;
    out.write("overlap.json", &report.to_json())?;
    out.write("overlap.csv", &report.to_csv())?;
    let k = trajectories.len();
    println!("{k} trajectories");
    for row in report.rows.iter().filter(|r| r.k == k) {
        println!("  n={}: overlap {:.2}% (distinct {:.2}%)", row.n, row.overlap_pct, row.distinct_overlap_pct);
    }
    println!("wrote {}", out.0.display());
    Ok(())
}

fn read_store(path: &Path, expected_vocab: Option<usize>) -> anyhow::Result<NGramStore> {
    let file = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    import_store(BufReader::new(file), expected_vocab, Default::default()).map_err(|e| match e {
        StoreFileError::Io(e) => anyhow::Error::new(e).context(format!("reading {}", path.display())),
        e => usage(format!("{}: {e}", path.display())),
    })
}

fn print_store_summary(store: &NGramStore) {
    let stats = store.snapshot_stats();
    println!("vocab_size {}", store.vocab_size());
    for (n, count) in stats.entries_per_level.iter().enumerate() {
        println!("  {}-gram keys: {count}", n + 1);
    }
    println!("total keys {}, stored pairs {}, ~{} bytes", stats.total_entries, stats.stored_pairs, stats.memory_bytes_estimate);
}

pub fn store_inspect(file: &Path) -> anyhow::Result<()> {
    print_store_summary(&read_store(file, None)?);
    Ok(())
}

/// Validates a store file and writes a normalized copy to the output directory.
pub fn store_import(args: &RunArgs, file: &Path) -> anyhow::Result<()> {
    let expected = match args.vocab_size {
        Some(v) => Some(v),
        None if args.model.is_some() || args.remote.is_some() || args.corpus.is_some() => {
            Some(load_target(args)?.vocab_size())
        }
        None if args.family.is_some() => Some(load_problems(args, 1)?.problems[0].model.vocab_size()),
        None => None,
    };
    let store = read_store(file, expected)?;
    let out = Outputs::create(args)?;
    export_store(&store, out.writer("store.jsonl")?).context("writing store.jsonl")?;
    print_store_summary(&store);
    println!("wrote {}", out.path("store.jsonl").display());
    Ok(())
}

/// Decodes the first problem and exports the store it built.
pub fn store_export(args: &RunArgs) -> anyhow::Result<()> {
    let set = load_problems(args, 1)?;
    nonempty(&set)?;
    let topology = Arc::new(load_topology(args.topology())?);
    let problem = &set.problems[0];
    let mode = *args.modes().first().expect("at least one mode");
    let config = args.engine(mode, set.default_max_tokens);
    let mut session = Session::new(problem.model.clone(), topology, config, derive_seed(args.seed(), problem.index as u64));
    session.run_problem(&problem.prompt, args.trajectories()).map_err(engine_err)?;
    let out = Outputs::create(args)?;
    export_store(session.store(), out.writer("store.jsonl")?).context("writing store.jsonl")?;
    print_store_summary(session.store());
    println!("wrote {}", out.path("store.jsonl").display());
    Ok(())
}

#[derive(Serialize)]
struct ProbeRow {
    problem: usize,
    context: usize,
    stochastic: f64,
    deterministic: f64,
}

#[derive(Serialize)]
struct ProbeReportFile {
    format: &'static str,
    version: u32,
    width: usize,
    contexts: usize,
    misses: usize,
    stochastic_mean: f64,
    deterministic_mean: f64,
    rows: Vec<ProbeRow>,
}

/// Populates a store per problem by decoding, then compares the exact
/// single-position acceptance probability of both draft modes.
pub fn probe(args: &RunArgs) -> anyhow::Result<()> {
    let set = load_problems(args, 10)?;
    nonempty(&set)?;
    let topology = Arc::new(load_topology(args.topology())?);
    let (count, max_len) = (args.contexts.unwrap_or(20), args.context_len.unwrap_or(200));
    let probe_err = |e: AnalysisError| anyhow::Error::new(e).context("probe failed");
    let mut rows = Vec::new();
    let mut misses = 0;
    for problem in &set.problems {
        let seed = derive_seed(args.seed(), problem.index as u64);
        let config = args.engine(DraftMode::Stochastic, set.default_max_tokens);
        let mut session = Session::new(problem.model.clone(), Arc::clone(&topology), config, seed);
        session.run_problem(&problem.prompt, args.trajectories()).map_err(engine_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let contexts = sample_contexts(&problem.model, &problem.prompt, count, max_len, &mut rng).map_err(probe_err)?;
        let s = acceptance_probe(&problem.model, session.store(), &contexts, DraftMode::Stochastic).map_err(probe_err)?;
        let d = acceptance_probe(&problem.model, session.store(), &contexts, DraftMode::Deterministic).map_err(probe_err)?;
        misses += s.misses;
        for (i, (stochastic, deterministic)) in s.per_context.into_iter().zip(d.per_context).enumerate() {
            rows.push(ProbeRow { problem: problem.index, context: i, stochastic, deterministic });
        }
    }
    let mean = |f: fn(&ProbeRow) -> f64| if rows.is_empty() { 0.0 } else { rows.iter().map(f).sum::<f64>() / rows.len() as f64 };
    let report = ProbeReportFile {
        format: PROBE_FORMAT,
        version: PROBE_VERSION,
        width: PROBE_WIDTH,
        contexts: rows.len(),
        misses,
        stochastic_mean: mean(|r| r.stochastic),
        deterministic_mean: mean(|r| r.deterministic),
        rows,
    };
    let out = Outputs::create(args)?;
    out.write("probe.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let mut csv = String::from("problem,context,stochastic,deterministic\n");
    for r in &report.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.problem, r.context, r.stochastic, r.deterministic));
    }
    out.write("probe.csv", &csv)?;
    println!(
        "{} contexts ({} store misses): acceptance stochastic {:.4}, deterministic {:.4}",
        report.contexts, report.misses, report.stochastic_mean, report.deterministic_mean
    );
    println!("wrote {}", out.0.display());
    Ok(())
}

/// Writes the model specs and prompts of a synthetic problem set so they
/// can be reused with --model/--prompts or served by the logit server.
pub fn synth(args: &RunArgs) -> anyhow::Result<()> {
    let name = args.family.as_deref().unwrap_or("redundant");
    let mut family = TaskFamily::by_name(name).ok_or_else(|| usage(format!("unknown family {name:?}")))?;
    if let Some(t) = args.temperature {
        family.temperature = t;
    }
    let problems = family.problems(args.seed(), args.problems.unwrap_or(1)).map_err(|e| usage(e.to_string()))?;
    let out = Outputs::create(args)?;
    for p in &problems {
        out.write(&format!("model-{}.json", p.index), &(serde_json::to_string(&p.model.spec().to_file_spec())? + "\n"))?;
    }
    let prompts: Vec<&[TokenId]> = problems.iter().map(|p| p.prompt.as_slice()).collect();
    write_trajectories(&prompts, out.writer("prompts.jsonl")?).context("writing prompts.jsonl")?;
    println!("wrote {} {name} problems to {} (temperature {})", problems.len(), out.0.display(), family.temperature);
    Ok(())
}
