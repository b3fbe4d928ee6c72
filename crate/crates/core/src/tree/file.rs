//! Tree and stats files.
//!
//! ```text
//! {"format":"stand-tree","version":1,"nodes":[{"id":0,"parent":null,"children":[2]},...]}
//! {"format":"stand-tree-stats","version":1,"0":{"accept":12,"visit":40},...}
//! ```
//!
//! Stats files are a flat map from node id to counts; the `format` and
//! `version` keys sit beside the node ids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NodeId, NodeStats, TreeError, TreeTopology};

pub const TREE_FORMAT: &str = "stand-tree";
pub const STATS_FORMAT: &str = "stand-tree-stats";
pub const TREE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TreeFileNode {
    pub id: u32,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TreeFile {
    pub format: String,
    pub version: u32,
    pub nodes: Vec<TreeFileNode>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct StatsEntry {
    pub accept: u64,
    pub visit: u64,
}

pub fn tree_to_json(topology: &TreeTopology) -> String {
    let nodes = topology
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| TreeFileNode {
            id: i as u32,
            parent: n.parent.map(|p| p.0),
            children: n.children.iter().map(|c| c.0).collect(),
        })
        .collect();
    let file = TreeFile { format: TREE_FORMAT.into(), version: TREE_VERSION, nodes };
    serde_json::to_string(&file).expect("tree file serializes") + "\n"
}

pub fn read_tree(text: &str) -> Result<TreeTopology, TreeError> {
    let file: TreeFile = serde_json::from_str(text).map_err(|e| TreeError::Format(e.to_string()))?;
    if file.format != TREE_FORMAT || file.version != TREE_VERSION {
        return Err(TreeError::Format(format!("unsupported format {:?} version {}", file.format, file.version)));
    }
    let mut links = Vec::with_capacity(file.nodes.len());
    for (position, node) in file.nodes.into_iter().enumerate() {
        if node.id as usize != position {
            return Err(TreeError::NonDenseIds { position, found: node.id });
        }
        links.push((node.parent.map(NodeId), node.children.into_iter().map(NodeId).collect()));
    }
    TreeTopology::from_links(links)
}

pub fn stats_to_json(stats: &NodeStats) -> String {
    let mut map = serde_json::Map::new();
    map.insert("format".into(), STATS_FORMAT.into());
    map.insert("version".into(), TREE_VERSION.into());
    for i in 0..stats.len() {
        let entry = StatsEntry { accept: stats.accept[i], visit: stats.visit[i] };
        map.insert(i.to_string(), serde_json::to_value(entry).expect("stats entry serializes"));
    }
    serde_json::to_string(&map).expect("stats file serializes") + "\n"
}

/// Reads a stats file; it must cover exactly the node ids `0..expected_len`.
pub fn read_stats(text: &str, expected_len: usize) -> Result<NodeStats, TreeError> {
    let mut map: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| TreeError::Format(e.to_string()))?;
    let format = map.remove("format");
    let version = map.remove("version");
    if format.as_ref().and_then(|f| f.as_str()) != Some(STATS_FORMAT)
        || version.as_ref().and_then(|v| v.as_u64()) != Some(TREE_VERSION as u64)
    {
        return Err(TreeError::Format(format!("unsupported stats file: format {format:?} version {version:?}")));
    }
    if map.len() != expected_len {
        return Err(TreeError::StatsSize { expected: expected_len, found: map.len() });
    }
    let mut stats = NodeStats::new(expected_len);
    for (key, value) in map {
        let id: usize = key.parse().map_err(|_| TreeError::Format(format!("bad node id {key:?}")))?;
        if id >= expected_len {
            return Err(TreeError::MissingNode(id as u32));
        }
        let entry: StatsEntry = serde_json::from_value(value).map_err(|e| TreeError::Format(e.to_string()))?;
        if entry.accept > entry.visit {
            return Err(TreeError::Format(format!("node {id}: accept exceeds visit")));
        }
        stats.accept[id] = entry.accept;
        stats.visit[id] = entry.visit;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::super::build_initial_tree;
    use super::*;

    #[test]
    fn tree_round_trip_is_exact() {
        let tree = build_initial_tree();
        let text = tree_to_json(&tree);
        let back = read_tree(&text).unwrap();
        assert_eq!(back, tree);
        assert_eq!(tree_to_json(&back), text);
    }

    #[test]
    fn stats_round_trip_is_exact() {
        let stats = NodeStats::from_counts(vec![3, 0, 2], vec![5, 1, 2]).unwrap();
        let text = stats_to_json(&stats);
        assert_eq!(read_stats(&text, 3).unwrap(), stats);
        assert!(read_stats(&text, 4).is_err());
    }

    #[test]
    fn rejects_unknown_versions() {
        let text = tree_to_json(&TreeTopology::chain(3)).replace("\"version\":1", "\"version\":7");
        assert!(matches!(read_tree(&text), Err(TreeError::Format(_))));
        let stats = stats_to_json(&NodeStats::new(2)).replace("\"version\":1", "\"version\":2");
        assert!(read_stats(&stats, 2).is_err());
        assert!(read_stats(r#"{"0":{"accept":1,"visit":1}}"#, 1).is_err());
    }

    #[test]
    fn rejects_broken_trees() {
        let text = r#"{"format":"stand-tree","version":1,"nodes":[{"id":0,"parent":null,"children":[1]},{"id":1,"parent":null,"children":[]}]}"#;
        assert!(read_tree(text).is_err());
        let text = r#"{"format":"stand-tree","version":1,"nodes":[{"id":1,"parent":null,"children":[]}]}"#;
        assert!(read_tree(text).is_err());
    }
}
