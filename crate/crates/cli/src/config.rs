//! Run settings shared by every subcommand. Flags override the `--config`
//! JSON file, which overrides the built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;
use stand_core::model::DEFAULT_TEMPERATURE;
use stand_core::{DraftMode, EngineConfig, StoreScope, TokenId};

use crate::UsageError;

pub const DEFAULT_TOPOLOGY: &str = "builtin:optimized-80";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Stochastic,
    Deterministic,
    Both,
}

impl ModeArg {
    pub fn modes(self) -> Vec<DraftMode> {
        match self {
            ModeArg::Stochastic => vec![DraftMode::Stochastic],
            ModeArg::Deterministic => vec![DraftMode::Deterministic],
            ModeArg::Both => vec![DraftMode::Stochastic, DraftMode::Deterministic],
        }
    }
}

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// Base seed; problem i of a run uses a seed derived from (seed, i).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files [default: stand-out].
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Markov model spec JSON file.
    #[arg(long, global = true, help_heading = "Model source (pick one)")]
    pub model: Option<PathBuf>,
    /// Token corpus (JSON lines with a `tokens` array) to replay.
    #[arg(long, global = true, help_heading = "Model source (pick one)")]
    pub corpus: Option<PathBuf>,
    /// Base URL of a logit server.
    #[arg(long, global = true, help_heading = "Model source (pick one)")]
    pub remote: Option<String>,
    /// Synthetic task family: redundant, ood or tiny.
    #[arg(long, global = true, help_heading = "Model source (pick one)")]
    pub family: Option<String>,

    /// Number of synthetic problems (with --family).
    #[arg(long, global = true)]
    pub problems: Option<usize>,
    /// Prompt token ids, comma separated [default: 0].
    #[arg(long, global = true, value_delimiter = ',')]
    pub prompt: Option<Vec<TokenId>>,
    /// File of prompts in the trajectory format, one problem per line.
    #[arg(long, global = true)]
    pub prompts: Option<PathBuf>,
    /// Vocabulary size for --corpus and --remote, and the expected size for `store import`.
    #[arg(long, global = true)]
    pub vocab_size: Option<usize>,
    /// Longest context the corpus model conditions on [default: 3].
    #[arg(long, global = true)]
    pub corpus_order: Option<usize>,
    /// Uniform mass mixed into corpus model rows [default: 0.05].
    #[arg(long, global = true)]
    pub corpus_smoothing: Option<f64>,

    /// Tree file, or builtin:initial-625, builtin:optimized-80, builtin:heuristic-80.
    #[arg(long, global = true)]
    pub topology: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Trajectories per problem [default: 4].
    #[arg(long, global = true)]
    pub trajectories: Option<usize>,
    #[arg(long, global = true)]
    pub max_tokens: Option<usize>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// per_trajectory, per_problem or global.
    #[arg(long, global = true)]
    pub scope: Option<StoreScope>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub stop_tokens: Option<Vec<TokenId>>,
    /// Seed the store from the prompt before each trajectory [default: true].
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub prefill_seeding: Option<bool>,
    /// Problems decoded concurrently [default: 1].
    #[arg(long, global = true)]
    pub parallel_problems: Option<usize>,
    /// Measure decode wall time. Reports are then no longer byte-identical across runs.
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub wall_clock: Option<bool>,

    /// Node budget for tree-optimize [default: 80].
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Probe contexts sampled per problem [default: 20].
    #[arg(long, global = true)]
    pub contexts: Option<usize>,
    /// Longest continuation appended to the prompt for a probe context [default: 200].
    #[arg(long, global = true)]
    pub context_len: Option<usize>,
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($field:ident),* $(,)?) => {
        RunArgs { $($field: $top.$field.or($base.$field)),* }
    };
}

impl RunArgs {
    /// Fields set in `self` win over `base`.
    pub fn over(self, base: RunArgs) -> RunArgs {
        overlay!(
            self, base, seed, output_dir, model, corpus, remote, family, problems, prompt, prompts, vocab_size,
            corpus_order, corpus_smoothing, topology, mode, trajectories, max_tokens, temperature, scope,
            stop_tokens, prefill_seeding, parallel_problems, wall_clock, k, contexts, context_len,
        )
    }

    pub fn load(path: &Path) -> anyhow::Result<RunArgs> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("stand-out"))
    }

    pub fn topology(&self) -> &str {
        self.topology.as_deref().unwrap_or(DEFAULT_TOPOLOGY)
    }

    pub fn modes(&self) -> Vec<DraftMode> {
        self.mode.unwrap_or(ModeArg::Stochastic).modes()
    }

    pub fn trajectories(&self) -> usize {
        self.trajectories.unwrap_or(4)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(DEFAULT_TEMPERATURE)
    }

    pub fn engine(&self, mode: DraftMode, default_max_tokens: usize) -> EngineConfig {
        EngineConfig {
            mode,
            scope: self.scope.unwrap_or_default(),
            max_tokens: self.max_tokens.unwrap_or(default_max_tokens),
            stop_tokens: self.stop_tokens.clone().unwrap_or_default(),
            prefill_seeding: self.prefill_seeding.unwrap_or(true),
            wall_clock: self.wall_clock.unwrap_or(false),
            ..EngineConfig::default()
        }
    }
}
