//! Static draft-tree topologies and the data-driven pruning procedure.
//!
//! The root of every topology is implicit: it stands for the last committed
//! context position. Nodes without a parent are the root's children (level 1)
//! and a node's depth is its distance from that implicit root. Node ids are
//! dense indices `0..len`.

mod file;

use std::fmt;

use rand::Rng;
use thiserror::Error;

pub use file::{
    read_stats, read_tree, stats_to_json, tree_to_json, StatsEntry, TreeFile, TreeFileNode, STATS_FORMAT, TREE_FORMAT, TREE_VERSION,
};

/// Largest number of children a node may have: the store keeps ten candidates.
pub const MAX_CHILDREN: usize = crate::store::STORE_TOP_K;

/// Per-depth node counts of the 625-node initialization tree (depths 1..=20).
///
/// Wide in the first four levels, then a long narrowing tail; the counts are
/// non-increasing after the peak at depth 3.
pub const INITIAL_TREE_PROFILE: [usize; 20] = [10, 60, 90, 90, 75, 60, 50, 40, 32, 26, 20, 16, 13, 10, 8, 7, 6, 5, 4, 3];

/// Per-depth node counts of the shallow 80-node heuristic tree (depths 1..=7).
pub const HEURISTIC_TREE_PROFILE: [usize; 7] = [10, 22, 18, 12, 8, 6, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("node {0} referenced but not present")]
    MissingNode(u32),
    #[error("node ids must be 0..n in order; found {found} at position {position}")]
    NonDenseIds { position: usize, found: u32 },
    #[error("children of {parent:?} are inconsistent with parent links: {detail}")]
    InconsistentChildren { parent: Option<u32>, detail: String },
    #[error("cycle through node {0}")]
    Cycle(u32),
    #[error("node {node} has {count} children, more than {MAX_CHILDREN}")]
    TooManyChildren { node: u32, count: usize },
    #[error("level profile is infeasible at depth {depth}")]
    InfeasibleProfile { depth: usize },
    #[error("accepted path is not a connected root-down path at step {0}")]
    DisconnectedPath(usize),
    #[error("stats cover {found} nodes but the topology has {expected}")]
    StatsSize { expected: usize, found: usize },
    #[error("invalid tree file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub children: Vec<NodeId>,
}

/// An ancestor-closed, acyclic draft-tree shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeTopology {
    nodes: Vec<TreeNode>,
    roots: Vec<NodeId>,
}

impl TreeTopology {
    /// Builds a topology from `(parent, ordered children)` per node id.
    ///
    /// Level-1 order is the id order of parentless nodes.
    pub fn from_links(links: Vec<(Option<NodeId>, Vec<NodeId>)>) -> Result<Self, TreeError> {
        let n = links.len();
        for (parent, children) in &links {
            if let Some(p) = parent {
                if p.index() >= n {
                    return Err(TreeError::MissingNode(p.0));
                }
            }
            if let Some(c) = children.iter().find(|c| c.index() >= n) {
                return Err(TreeError::MissingNode(c.0));
            }
        }
        let roots = (0..n).filter(|&i| links[i].0.is_none()).map(|i| NodeId(i as u32)).collect();
        let mut nodes: Vec<TreeNode> =
            links.into_iter().map(|(parent, children)| TreeNode { parent, depth: 0, children }).collect();
        // Depths by walking parent links; a walk longer than n means a cycle.
        for i in 0..n {
            let mut depth = 1;
            let mut cur = nodes[i].parent;
            while let Some(p) = cur {
                if p.index() == i || depth > n {
                    return Err(TreeError::Cycle(i as u32));
                }
                depth += 1;
                cur = nodes[p.index()].parent;
            }
            nodes[i].depth = depth;
        }
        let topology = Self { nodes, roots };
        topology.validate()?;
        Ok(topology)
    }

    /// Builds a topology from parent links alone, children in id order.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self, TreeError> {
        let mut links: Vec<(Option<NodeId>, Vec<NodeId>)> =
            parents.iter().map(|p| (p.map(|p| NodeId(p as u32)), Vec::new())).collect();
        for (i, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                if p >= parents.len() {
                    return Err(TreeError::MissingNode(p as u32));
                }
                links[p].1.push(NodeId(i as u32));
            }
        }
        Self::from_links(links)
    }

    /// A single chain of `depth` nodes.
    pub fn chain(depth: usize) -> Self {
        let parents: Vec<Option<usize>> = (0..depth).map(|i| i.checked_sub(1)).collect();
        Self::from_parents(&parents).expect("chain is a valid tree")
    }

    /// Builds a breadth-first tree with `counts[d]` nodes at depth `d + 1`.
    ///
    /// Children are handed out to the parents of the previous level by a
    /// largest-quotient rule with weights `(rank + 1)^-skew`, capped at
    /// [`MAX_CHILDREN`], so earlier (higher-ranked) nodes get more children
    /// and the tail of the tree hangs off the first nodes of each level.
    pub fn from_level_profile(counts: &[usize], skew: f64) -> Result<Self, TreeError> {
        let mut parents: Vec<Option<usize>> = Vec::new();
        let Some(&first) = counts.first() else {
            return Ok(Self { nodes: Vec::new(), roots: Vec::new() });
        };
        if first > MAX_CHILDREN {
            return Err(TreeError::InfeasibleProfile { depth: 1 });
        }
        parents.extend(std::iter::repeat_n(None, first));
        let mut level_start = 0;
        for (d, &count) in counts.iter().enumerate().skip(1) {
            let level_len = counts[d - 1];
            if count > level_len * MAX_CHILDREN || (count > 0 && level_len == 0) {
                return Err(TreeError::InfeasibleProfile { depth: d + 1 });
            }
            let mut alloc = vec![0usize; level_len];
            for _ in 0..count {
                let best = (0..level_len)
                    .filter(|&i| alloc[i] < MAX_CHILDREN)
                    .max_by(|&a, &b| {
                        let qa = (a as f64 + 1.0).powf(-skew) / (alloc[a] as f64 + 1.0);
                        let qb = (b as f64 + 1.0).powf(-skew) / (alloc[b] as f64 + 1.0);
                        qa.total_cmp(&qb).then(b.cmp(&a))
                    })
                    .expect("capacity checked above");
                alloc[best] += 1;
            }
            for (i, &c) in alloc.iter().enumerate() {
                parents.extend(std::iter::repeat_n(Some(level_start + i), c));
            }
            level_start += level_len;
        }
        Self::from_parents(&parents)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Level-1 nodes in slot order.
    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    /// Children of `parent`, or the level-1 nodes for `None`.
    pub fn children_of(&self, parent: Option<NodeId>) -> &[NodeId] {
        match parent {
            Some(p) => &self.nodes[p.index()].children,
            None => &self.roots,
        }
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node ids in breadth-first order (level-1 first, children in slot order).
    pub fn bfs_order(&self) -> Vec<NodeId> {
        let mut order = self.roots.clone();
        let mut i = 0;
        while i < order.len() {
            order.extend_from_slice(&self.nodes[order[i].index()].children);
            i += 1;
        }
        order
    }

    /// Checks ancestor closure, acyclicity, depth consistency, child-list
    /// consistency and the per-node child cap.
    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.nodes.len();
        let mut listed = vec![0usize; n];
        let mut check_children = |parent: Option<NodeId>, children: &[NodeId]| -> Result<(), TreeError> {
            if children.len() > MAX_CHILDREN {
                return Err(TreeError::TooManyChildren { node: parent.map_or(u32::MAX, |p| p.0), count: children.len() });
            }
            for c in children {
                let child = self.nodes.get(c.index()).ok_or(TreeError::MissingNode(c.0))?;
                if child.parent != parent {
                    return Err(TreeError::InconsistentChildren {
                        parent: parent.map(|p| p.0),
                        detail: format!("node {c} has parent {:?}", child.parent.map(|p| p.0)),
                    });
                }
                listed[c.index()] += 1;
            }
            Ok(())
        };
        check_children(None, &self.roots)?;
        for (i, node) in self.nodes.iter().enumerate() {
            check_children(Some(NodeId(i as u32)), &node.children)?;
        }
        if let Some(i) = listed.iter().position(|&c| c != 1) {
            return Err(TreeError::InconsistentChildren {
                parent: self.nodes[i].parent.map(|p| p.0),
                detail: format!("node {i} listed {} times", listed[i]),
            });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let expected = match node.parent {
                None => 1,
                Some(p) => self.nodes.get(p.index()).ok_or(TreeError::MissingNode(p.0))?.depth + 1,
            };
            if node.depth != expected {
                return Err(TreeError::Cycle(i as u32));
            }
        }
        // Every node reachable from the roots means no detached cycles.
        if self.bfs_order().len() != n {
            return Err(TreeError::Cycle(0));
        }
        Ok(())
    }

    /// Sub-topology induced by an ancestor-closed `selected` set, relabeled in
    /// breadth-first order. Sibling order follows `rank` (smaller first,
    /// ties by original slot). Returns the topology and new-to-old id map.
    fn induced<F: Fn(NodeId) -> u64>(&self, selected: &[bool], rank: F) -> (Self, Vec<NodeId>) {
        let sorted = |ids: &[NodeId]| -> Vec<NodeId> {
            let mut kept: Vec<(usize, NodeId)> =
                ids.iter().enumerate().filter(|(_, id)| selected[id.index()]).map(|(slot, id)| (slot, *id)).collect();
            kept.sort_by_key(|&(slot, id)| (rank(id), slot));
            kept.into_iter().map(|(_, id)| id).collect()
        };
        let mut old_ids: Vec<NodeId> = sorted(&self.roots);
        let mut parents: Vec<Option<usize>> = vec![None; old_ids.len()];
        let mut i = 0;
        while i < old_ids.len() {
            for child in sorted(&self.nodes[old_ids[i].index()].children) {
                old_ids.push(child);
                parents.push(Some(i));
            }
            i += 1;
        }
        let topology = Self::from_parents(&parents).expect("induced subtree of a valid tree is valid");
        (topology, old_ids)
    }
}

/// Per-depth node counts; index `d - 1` holds the count at depth `d`.
pub fn depth_histogram(topology: &TreeTopology) -> Vec<usize> {
    let mut hist = vec![0; topology.max_depth()];
    for node in topology.nodes() {
        hist[node.depth - 1] += 1;
    }
    hist
}

/// The 625-node, depth-20 tree used to start tree optimization.
pub fn build_initial_tree() -> TreeTopology {
    TreeTopology::from_level_profile(&INITIAL_TREE_PROFILE, 1.0).expect("initial profile is feasible")
}

/// A shallow, wide 80-node tree built from a fixed level profile.
pub fn build_heuristic_tree() -> TreeTopology {
    TreeTopology::from_level_profile(&HEURISTIC_TREE_PROFILE, 1.0).expect("heuristic profile is feasible")
}

/// Per-node acceptance statistics gathered while decoding with a topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeStats {
    accept: Vec<u64>,
    visit: Vec<u64>,
}

impl NodeStats {
    pub fn new(len: usize) -> Self {
        Self { accept: vec![0; len], visit: vec![0; len] }
    }

    pub fn from_counts(accept: Vec<u64>, visit: Vec<u64>) -> Result<Self, TreeError> {
        if accept.len() != visit.len() {
            return Err(TreeError::StatsSize { expected: accept.len(), found: visit.len() });
        }
        Ok(Self { accept, visit })
    }

    pub fn len(&self) -> usize {
        self.accept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accept.is_empty()
    }

    pub fn acceptance(&self, id: NodeId) -> u64 {
        self.accept[id.index()]
    }

    pub fn visits(&self, id: NodeId) -> u64 {
        self.visit[id.index()]
    }

    /// Records one verification round: `accepted_path` (starting at a level-1
    /// node, each step a child of the previous) gains one acceptance per node
    /// and every node in `drafted` one visit.
    pub fn record_acceptance(
        &mut self,
        topology: &TreeTopology,
        accepted_path: &[NodeId],
        drafted: &[NodeId],
    ) -> Result<(), TreeError> {
        if self.len() != topology.len() {
            return Err(TreeError::StatsSize { expected: topology.len(), found: self.len() });
        }
        let mut parent = None;
        for (step, &id) in accepted_path.iter().enumerate() {
            if id.index() >= topology.len() || topology.node(id).parent != parent {
                return Err(TreeError::DisconnectedPath(step));
            }
            parent = Some(id);
        }
        if let Some(bad) = drafted.iter().find(|id| id.index() >= topology.len()) {
            return Err(TreeError::MissingNode(bad.0));
        }
        for &id in drafted {
            self.visit[id.index()] += 1;
        }
        for &id in accepted_path {
            self.accept[id.index()] += 1;
        }
        Ok(())
    }

    /// Adds another run's counts (same topology).
    pub fn absorb(&mut self, other: &NodeStats) -> Result<(), TreeError> {
        if self.len() != other.len() {
            return Err(TreeError::StatsSize { expected: self.len(), found: other.len() });
        }
        self.accept.iter_mut().zip(&other.accept).for_each(|(a, b)| *a += b);
        self.visit.iter_mut().zip(&other.visit).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `accept <= visit` everywhere and `accept(child) <= accept(parent)`.
    pub fn is_prefix_closed(&self, topology: &TreeTopology) -> bool {
        self.len() == topology.len()
            && topology.nodes().iter().enumerate().all(|(i, node)| {
                self.accept[i] <= self.visit[i] && node.parent.is_none_or(|p| self.accept[i] <= self.accept[p.index()])
            })
    }
}

/// Keeps `min(k, len)` nodes maximizing total acceptance count.
///
/// Greedy: nodes are taken by descending acceptance count (ties in
/// breadth-first order) together with any missing ancestors, skipping nodes
/// whose ancestor chain no longer fits the budget. The result is relabeled
/// breadth-first with siblings sorted by descending acceptance count.
pub fn prune_to_top_k(topology: &TreeTopology, stats: &NodeStats, k: usize) -> TreeTopology {
    prune_with_mapping(topology, stats, k).0
}

/// [`prune_to_top_k`] plus the new-to-old node id map.
pub fn prune_with_mapping(topology: &TreeTopology, stats: &NodeStats, k: usize) -> (TreeTopology, Vec<NodeId>) {
    assert_eq!(stats.len(), topology.len(), "stats must cover every node");
    let budget = k.min(topology.len());
    let bfs = topology.bfs_order();
    let mut bfs_rank = vec![0usize; topology.len()];
    for (rank, id) in bfs.iter().enumerate() {
        bfs_rank[id.index()] = rank;
    }
    let mut order = bfs.clone();
    order.sort_by_key(|id| (std::cmp::Reverse(stats.acceptance(*id)), bfs_rank[id.index()]));

    let mut selected = vec![false; topology.len()];
    let mut taken = 0;
    let mut chain = Vec::new();
    while taken < budget {
        let before = taken;
        for &id in &order {
            if taken == budget {
                break;
            }
            if selected[id.index()] {
                continue;
            }
            chain.clear();
            let mut cur = Some(id);
            while let Some(c) = cur.filter(|c| !selected[c.index()]) {
                chain.push(c);
                cur = topology.node(c).parent;
            }
            if taken + chain.len() <= budget {
                for c in &chain {
                    selected[c.index()] = true;
                }
                taken += chain.len();
            }
        }
        // A frontier node always costs one, so every pass makes progress.
        debug_assert!(taken > before);
        if taken == before {
            break;
        }
    }
    topology.induced(&selected, |id| u64::MAX - stats.acceptance(id))
}

/// Uniformly grows a random ancestor-closed subtree of `min(k, len)` nodes:
/// each step adds a node drawn uniformly from the current frontier.
pub fn random_subtree<R: Rng + ?Sized>(topology: &TreeTopology, k: usize, rng: &mut R) -> TreeTopology {
    let budget = k.min(topology.len());
    let mut selected = vec![false; topology.len()];
    let mut frontier: Vec<NodeId> = topology.roots().to_vec();
    for _ in 0..budget {
        let pick = frontier.swap_remove(rng.random_range(0..frontier.len()));
        selected[pick.index()] = true;
        frontier.extend_from_slice(&topology.node(pick).children);
    }
    topology.induced(&selected, |_| 0).0
}
