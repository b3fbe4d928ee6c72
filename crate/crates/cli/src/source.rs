//! Resolves the model source, prompts and draft-tree topology of a run.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use stand_core::analysis::read_trajectories;
use stand_core::model::{
    CorpusReplayModel, DenseDistribution, MarkovModel, MarkovModelSpec, ModelError, RemoteConfig, RemoteModel,
};
use stand_core::synthetic::{Problem, TaskFamily};
use stand_core::tree::read_tree;
use stand_core::tree::{build_heuristic_tree, build_initial_tree};
use stand_core::{TargetModel, TokenId, TreeTopology};

use crate::config::RunArgs;
use crate::UsageError;

const OPTIMIZED_80: &str = include_str!("../assets/optimized-80.json");

#[derive(Clone)]
pub enum Target {
    Markov(Arc<MarkovModel>),
    Corpus(Arc<CorpusReplayModel>),
    Remote(RemoteModel),
}

impl TargetModel for Target {
    fn vocab_size(&self) -> usize {
        match self {
            Target::Markov(m) => m.vocab_size(),
            Target::Corpus(m) => m.vocab_size(),
            Target::Remote(m) => m.vocab_size(),
        }
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<DenseDistribution, ModelError> {
        match self {
            Target::Markov(m) => m.next_distribution(context),
            Target::Corpus(m) => m.next_distribution(context),
            Target::Remote(m) => m.next_distribution(context),
        }
    }
}

/// Problems of the run plus the decode length used when `--max-tokens` is absent.
pub struct ProblemSet {
    pub problems: Vec<Problem<Target>>,
    pub default_max_tokens: usize,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_token_file(path: &Path) -> anyhow::Result<Vec<Vec<TokenId>>> {
    let file = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
    read_trajectories(BufReader::new(file)).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn source_count(args: &RunArgs) -> usize {
    [args.model.is_some(), args.corpus.is_some(), args.remote.is_some(), args.family.is_some()]
        .into_iter()
        .filter(|b| *b)
        .count()
}

/// Builds the target model and problems. `default_count` is the number of
/// synthetic problems when `--problems` is absent.
pub fn load_problems(args: &RunArgs, default_count: usize) -> anyhow::Result<ProblemSet> {
    if source_count(args) != 1 {
        return Err(usage("exactly one of --model, --corpus, --remote or --family is required"));
    }
    if let Some(name) = &args.family {
        let mut family =
            TaskFamily::by_name(name).ok_or_else(|| usage(format!("unknown family {name:?} (redundant, ood, tiny)")))?;
        if let Some(t) = args.temperature {
            family.temperature = t;
        }
        let problems = family
            .problems(args.seed(), args.problems.unwrap_or(default_count))
            .map_err(|e| usage(e.to_string()))?
            .into_iter()
            .map(|p| Problem { index: p.index, model: Target::Markov(p.model), prompt: p.prompt })
            .collect();
        return Ok(ProblemSet { problems, default_max_tokens: family.max_tokens });
    }
    if args.problems.is_some() {
        return Err(usage("--problems only applies to --family; use --prompts for several prompts"));
    }
    let target = load_target(args)?;
    let prompts = match (&args.prompt, &args.prompts) {
        (Some(_), Some(_)) => return Err(usage("--prompt and --prompts are mutually exclusive")),
        (Some(p), None) => vec![p.clone()],
        (None, Some(path)) => read_token_file(path)?,
        (None, None) => vec![vec![0]],
    };
    let vocab = target.vocab_size();
    let mut problems = Vec::with_capacity(prompts.len());
    for (index, prompt) in prompts.into_iter().enumerate() {
        if prompt.is_empty() {
            return Err(usage(format!("prompt {index} is empty")));
        }
        if let Some(t) = prompt.iter().find(|&&t| t as usize >= vocab) {
            return Err(usage(format!("prompt {index} has token {t} outside vocab {vocab}")));
        }
        problems.push(Problem { index, model: target.clone(), prompt });
    }
    Ok(ProblemSet { problems, default_max_tokens: stand_core::EngineConfig::default().max_tokens })
}

/// Loads a non-synthetic target model.
pub fn load_target(args: &RunArgs) -> anyhow::Result<Target> {
    let temperature = args.temperature();
    if let Some(path) = &args.model {
        let spec = MarkovModelSpec::load(path).map_err(|e| match e {
            ModelError::Io(e) => usage(format!("cannot read model {}: {e}", path.display())),
            e => usage(format!("invalid model {}: {e}", path.display())),
        })?;
        return Ok(Target::Markov(Arc::new(MarkovModel::new(spec, temperature).map_err(|e| usage(e.to_string()))?)));
    }
    if let Some(path) = &args.corpus {
        let sequences = read_token_file(path)?;
        let observed = sequences.iter().flatten().max().map_or(0, |&t| t as usize + 1);
        let vocab = args.vocab_size.unwrap_or(observed.max(2));
        let model = CorpusReplayModel::new(
            vocab,
            &sequences,
            args.corpus_order.unwrap_or(3),
            args.corpus_smoothing.unwrap_or(0.05),
            temperature,
        )
        .map_err(|e| usage(format!("corpus {}: {e}", path.display())))?;
        return Ok(Target::Corpus(Arc::new(model)));
    }
    if let Some(url) = &args.remote {
        let mut config = RemoteConfig::new(url.clone());
        config.temperature = temperature;
        config.vocab_size = args.vocab_size;
        let model = RemoteModel::connect(config).with_context(|| format!("connecting to {url}"))?;
        return Ok(Target::Remote(model));
    }
    Err(usage("no model source given"))
}

pub fn load_topology(name: &str) -> anyhow::Result<TreeTopology> {
    let parsed = match name {
        "builtin:initial-625" => return Ok(build_initial_tree()),
        "builtin:heuristic-80" => return Ok(build_heuristic_tree()),
        "builtin:optimized-80" => read_tree(OPTIMIZED_80).expect("embedded tree is valid"),
        other if other.starts_with("builtin:") => {
            return Err(usage(format!(
                "unknown builtin topology {other:?} (initial-625, optimized-80, heuristic-80)"
            )))
        }
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read topology {path}: {e}")))?;
            read_tree(&text).map_err(|e| usage(format!("invalid topology {path}: {e}")))?
        }
    };
    Ok(parsed)
}
