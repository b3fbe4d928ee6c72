//! Per-round draft trees: the static topology filled with store candidates.

use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use rustc_hash::FxHasher;
use serde::{Deserialize, Serialize};

use crate::gumbel::{sample_without_replacement, NoiseSource};
use crate::store::{NGramStore, MAX_GRAM};
use crate::tree::{NodeId, TreeTopology};
use crate::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DraftMode {
    /// Siblings drawn without replacement via Gumbel-Top-K; q is the store distribution.
    #[default]
    Stochastic,
    /// Siblings are the top candidates by probability; q is one-hot.
    Deterministic,
}

impl DraftMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DraftMode::Stochastic => "stochastic",
            DraftMode::Deterministic => "deterministic",
        }
    }
}

impl fmt::Display for DraftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DraftMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stochastic" => Ok(DraftMode::Stochastic),
            "deterministic" => Ok(DraftMode::Deterministic),
            other => Err(format!("unknown draft mode {other:?} (expected stochastic or deterministic)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DraftNode {
    pub token: TokenId,
    /// Probability of `token` under the distribution it was drawn from,
    /// i.e. conditioned on the elder siblings already being taken.
    pub q_value: f64,
    /// Gram length of the store entry the token came from (1..=4).
    pub source_level: usize,
    /// Draw order within the sibling group (0 = first).
    pub rank: usize,
}

/// One store lookup and the siblings drawn from it.
#[derive(Clone, Debug, PartialEq)]
pub struct SiblingGroup {
    pub parent: Option<NodeId>,
    pub source_level: usize,
    /// Positive store candidates renormalized to sum to one.
    pub candidates: Vec<(TokenId, f64)>,
    /// Filled child nodes in draw order.
    pub drawn: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct DraftTree {
    mode: DraftMode,
    context_len: usize,
    context_hash: u64,
    nodes: Vec<Option<DraftNode>>,
    groups: Vec<SiblingGroup>,
    /// Group index for the children of each node, plus one trailing slot for level 1.
    group_of: Vec<Option<u32>>,
    filled: usize,
}

impl DraftTree {
    fn new(mode: DraftMode, context: &[TokenId], len: usize) -> Self {
        Self {
            mode,
            context_len: context.len(),
            context_hash: context_fingerprint(context),
            nodes: vec![None; len],
            groups: Vec::new(),
            group_of: vec![None; len + 1],
            filled: 0,
        }
    }

    pub fn mode(&self) -> DraftMode {
        self.mode
    }

    /// Number of topology nodes (filled or not).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn filled_count(&self) -> usize {
        self.filled
    }

    /// True when nothing was drafted (root-level miss).
    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn node(&self, id: NodeId) -> Option<&DraftNode> {
        self.nodes.get(id.index()).and_then(|n| n.as_ref())
    }

    pub fn filled_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.is_some()).map(|(i, _)| NodeId(i as u32))
    }

    pub fn groups(&self) -> &[SiblingGroup] {
        &self.groups
    }

    /// The sibling group drafted under `parent` (`None` = level 1).
    pub fn group_under(&self, parent: Option<NodeId>) -> Option<&SiblingGroup> {
        let slot = parent.map_or(self.nodes.len(), |p| p.index());
        self.group_of.get(slot).copied().flatten().map(|g| &self.groups[g as usize])
    }

    pub fn matches_context(&self, context: &[TokenId]) -> bool {
        context.len() == self.context_len && context_fingerprint(context) == self.context_hash
    }

    /// Verification-side draft distribution of a filled node.
    pub fn q_distribution_at(&self, topology: &TreeTopology, id: NodeId) -> Option<Vec<(TokenId, f64)>> {
        let node = self.node(id)?;
        let group = self.group_under(topology.node(id).parent)?;
        let elders: Vec<TokenId> =
            group.drawn[..node.rank].iter().map(|e| self.nodes[e.index()].expect("drawn nodes are filled").token).collect();
        Some(q_distribution_at(self.mode, &group.candidates, &elders, node.token))
    }
}

/// Draft distribution for a sibling drawn from `candidates` after `elders`
/// were taken: the candidates renormalized without the elders, or a one-hot
/// at `token` in deterministic mode.
pub fn q_distribution_at(
    mode: DraftMode,
    candidates: &[(TokenId, f64)],
    elders: &[TokenId],
    token: TokenId,
) -> Vec<(TokenId, f64)> {
    match mode {
        DraftMode::Deterministic => vec![(token, 1.0)],
        DraftMode::Stochastic => {
            let rest: Vec<(TokenId, f64)> =
                candidates.iter().copied().filter(|(t, p)| *p > 0.0 && !elders.contains(t)).collect();
            let total: f64 = rest.iter().map(|(_, p)| p).sum();
            rest.into_iter().map(|(t, p)| (t, p / total)).collect()
        }
    }
}

fn context_fingerprint(context: &[TokenId]) -> u64 {
    let mut h = FxHasher::default();
    for &t in context {
        h.write_u32(t);
    }
    h.finish()
}

/// Last up-to-four tokens of a path, enough for any store lookup.
#[derive(Clone, Copy)]
struct Tail {
    tokens: [TokenId; MAX_GRAM],
    len: usize,
}

impl Tail {
    fn of(context: &[TokenId]) -> Self {
        let start = context.len().saturating_sub(MAX_GRAM);
        let mut tokens = [0; MAX_GRAM];
        tokens[..context.len() - start].copy_from_slice(&context[start..]);
        Self { tokens, len: context.len() - start }
    }

    fn push(mut self, token: TokenId) -> Self {
        if self.len == MAX_GRAM {
            self.tokens.copy_within(1.., 0);
            self.tokens[MAX_GRAM - 1] = token;
        } else {
            self.tokens[self.len] = token;
            self.len += 1;
        }
        self
    }

    fn as_slice(&self) -> &[TokenId] {
        &self.tokens[..self.len]
    }
}

/// Instantiates `topology` for one round.
///
/// Parents are visited breadth-first; each filled parent's lookup context is
/// the committed context followed by the drafted tokens on its path. A hit
/// fills up to as many children as the node has slots (fewer when the entry
/// has fewer positive candidates); a miss leaves the whole subtree unfilled.
/// Deterministic mode consumes no noise.
pub fn build_draft<N: NoiseSource + ?Sized>(
    context: &[TokenId],
    topology: &TreeTopology,
    store: &NGramStore,
    noise: &mut N,
    mode: DraftMode,
) -> DraftTree {
    let mut draft = DraftTree::new(mode, context, topology.len());
    if context.is_empty() || topology.is_empty() {
        return draft;
    }
    let mut tails: Vec<Option<Tail>> = vec![None; topology.len()];
    let root_tail = Tail::of(context);
    fill_children(&mut draft, topology, store, noise, None, root_tail, &mut tails);
    for id in topology.bfs_order() {
        if let Some(tail) = tails[id.index()] {
            if !topology.node(id).children.is_empty() {
                fill_children(&mut draft, topology, store, noise, Some(id), tail, &mut tails);
            }
        }
    }
    draft
}

fn fill_children<N: NoiseSource + ?Sized>(
    draft: &mut DraftTree,
    topology: &TreeTopology,
    store: &NGramStore,
    noise: &mut N,
    parent: Option<NodeId>,
    tail: Tail,
    tails: &mut [Option<Tail>],
) {
    let slots = topology.children_of(parent);
    let Some(hit) = store.lookup(tail.as_slice()) else {
        return;
    };
    let positive: Vec<(TokenId, f64)> = hit.dist.entries().iter().copied().filter(|(_, p)| *p > 0.0).collect();
    let total: f64 = positive.iter().map(|(_, p)| p).sum();
    if positive.is_empty() || total <= 0.0 {
        return;
    }
    let candidates: Vec<(TokenId, f64)> = positive.into_iter().map(|(t, p)| (t, p / total)).collect();
    let tokens: Vec<TokenId> = match draft.mode {
        // Entries are kept in descending-probability order.
        DraftMode::Deterministic => candidates.iter().take(slots.len()).map(|(t, _)| *t).collect(),
        DraftMode::Stochastic => sample_without_replacement(&candidates, slots.len(), noise),
    };
    let mut taken = 0.0;
    let mut drawn = Vec::with_capacity(tokens.len());
    for (rank, (&slot, &token)) in slots.iter().zip(&tokens).enumerate() {
        let p = candidates.iter().find(|(t, _)| *t == token).map_or(0.0, |(_, p)| *p);
        let q_value = match draft.mode {
            DraftMode::Deterministic => 1.0,
            DraftMode::Stochastic => (p / (1.0 - taken)).min(1.0),
        };
        taken += p;
        draft.nodes[slot.index()] = Some(DraftNode { token, q_value, source_level: hit.level, rank });
        tails[slot.index()] = Some(tail.push(token));
        drawn.push(slot);
    }
    draft.filled += drawn.len();
    let slot = parent.map_or(draft.nodes.len(), |p| p.index());
    draft.group_of[slot] = Some(draft.groups.len() as u32);
    draft.groups.push(SiblingGroup { parent, source_level: hit.level, candidates, drawn });
}
