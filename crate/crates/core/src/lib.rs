//! Model-free speculative decoding with a logit-preserving n-gram drafter.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: the target-model abstraction (synthetic Markov, corpus replay,
//!   remote logit server) and dense next-token distributions.
//! - [`store`]: the adaptive n-gram store that keeps compressed top-10
//!   next-token distributions for 1- to 4-token contexts.
//! - [`gumbel`]: Gumbel-Top-K sampling without replacement with a noise cache.
//! - [`tree`]: static draft-tree topologies, node statistics and pruning.
//! - [`drafter`]: per-round instantiation of a draft tree from the store.
//! - [`verifier`]: lossless speculative-sampling verification of a draft tree.
//! - [`engine`]: the decode loop, sessions and metrics.
//! - [`analysis`]: n-gram overlap and acceptance-probability probes.
//! - [`synthetic`] and [`optimize`]: benchmark task families and the
//!   tree-optimization pipeline built on top of the engine.

pub mod analysis;
pub mod drafter;
pub mod engine;
pub mod gumbel;
pub mod model;
pub mod optimize;
pub mod store;
pub mod synthetic;
pub mod tree;
pub mod verifier;

/// Vocabulary index of a token.
pub type TokenId = u32;

pub use drafter::{build_draft, DraftMode, DraftTree};
pub use engine::{DecodeMetrics, EngineConfig, Session, StoreScope, TrajectoryResult};

pub use gumbel::{sample_without_replacement, GumbelNoiseCache, NoiseSource, ZeroNoise};
pub use model::{DenseDistribution, ModelError, TargetModel};
pub use store::{CompressedDistribution, NGramStore};
pub use tree::{NodeId, NodeStats, TreeTopology};
pub use verifier::{verify_position, verify_tree, VerificationOutcome};

/// Derives an independent seed for sub-stream `index` of `seed` (SplitMix64 mixing).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
