//! Concept hierarchy and the LCS-based semantic metric.
//!
//! A [`ConceptTree`] is a rooted tree whose leaves are the fine-grained
//! classes. The semantic distance of two leaves is the height of their
//! lowest common subsumer divided by the height of the whole tree, and the
//! semantic similarity is its complement. Both are exact rationals.

use std::collections::HashMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact rational used for semantic distances and similarities.
pub type Rational = Ratio<u32>;

/// The CIFAR-100 concept tree shipped with the crate (2 / 10 / 100 nodes
/// from top to bottom under a single root).
pub const CIFAR100_TREE: &str = include_str!("../fixtures/cifar100_tree.tsv");

/// Parent marker used for the root record in tree files.
pub const ROOT_MARKER: &str = "ROOT";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{0}` is its own ancestor")]
    Cycle(String),
    #[error("line {line}: parent `{parent}` of `{node}` has not been declared")]
    UnknownParent {
        line: usize,
        node: String,
        parent: String,
    },
    #[error("multiple roots: `{0}` and `{1}`")]
    MultipleRoots(String, String),
    #[error("tree has no root")]
    NoRoot,
    #[error("tree height must be at least 1")]
    Degenerate,
    #[error("leaves lie at different depths (`{0}` at {1}, `{2}` at {3})")]
    UnevenLeaves(String, usize, String, usize),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("`{0}` is not a leaf")]
    NotALeaf(String),
}

/// Identifier of a concept node, unique within its tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: NodeId,
    label: String,
    parent: Option<usize>,
    children: Vec<usize>,
    depth: usize,
    height: usize,
}

/// Options controlling tree validation on load.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Require every leaf to sit at the same depth.
    pub strict_layers: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            strict_layers: true,
        }
    }
}

/// An immutable, validated concept hierarchy.
#[derive(Debug, Clone)]
pub struct ConceptTree {
    nodes: Vec<Node>,
    index: HashMap<NodeId, usize>,
    root: usize,
    leaves: Vec<usize>,
}

impl ConceptTree {
    /// Parses a tree file with strict layering.
    pub fn parse(text: &str) -> Result<Self, TreeError> {
        Self::parse_with(text, LoadOptions::default())
    }

    pub fn parse_with(text: &str, options: LoadOptions) -> Result<Self, TreeError> {
        let mut records = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(TreeError::Parse {
                    line: lineno + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let id = fields[0].trim();
            let parent = fields[1].trim();
            if id.is_empty() || parent.is_empty() {
                return Err(TreeError::Parse {
                    line: lineno + 1,
                    message: "empty node or parent id".into(),
                });
            }
            if id == ROOT_MARKER {
                return Err(TreeError::Parse {
                    line: lineno + 1,
                    message: format!("`{ROOT_MARKER}` is reserved"),
                });
            }
            let label = fields.get(2).map(|s| s.trim()).unwrap_or(id);
            let parent = (parent != ROOT_MARKER).then(|| parent.to_owned());
            records.push((lineno + 1, id.to_owned(), parent, label.to_owned()));
        }
        Self::build(records, options)
    }

    /// Builds a tree from `(id, parent, label)` triples, validating the same
    /// invariants as [`ConceptTree::parse`]. Parents must precede children.
    pub fn from_edges<I>(edges: I, options: LoadOptions) -> Result<Self, TreeError>
    where
        I: IntoIterator<Item = (String, Option<String>, String)>,
    {
        let records = edges
            .into_iter()
            .enumerate()
            .map(|(i, (id, parent, label))| (i + 1, id, parent, label))
            .collect();
        Self::build(records, options)
    }

    fn build(
        records: Vec<(usize, String, Option<String>, String)>,
        options: LoadOptions,
    ) -> Result<Self, TreeError> {
        let mut nodes: Vec<Node> = Vec::with_capacity(records.len());
        let mut index = HashMap::with_capacity(records.len());
        let mut root: Option<usize> = None;

        for (line, id, parent, label) in records {
            let node_id = NodeId(id);
            if index.contains_key(&node_id) {
                return Err(TreeError::DuplicateId(node_id.0));
            }
            let idx = nodes.len();
            let parent_idx = match parent {
                None => {
                    if let Some(r) = root {
                        return Err(TreeError::MultipleRoots(
                            nodes[r].id.0.clone(),
                            node_id.0,
                        ));
                    }
                    root = Some(idx);
                    None
                }
                Some(p) if p == node_id.0 => return Err(TreeError::Cycle(p)),
                Some(p) => match index.get(&NodeId(p.clone())) {
                    Some(&pi) => Some(pi),
                    None => {
                        return Err(TreeError::UnknownParent {
                            line,
                            node: node_id.0,
                            parent: p,
                        })
                    }
                },
            };
            let depth = parent_idx.map_or(0, |p: usize| nodes[p].depth + 1);
            if let Some(p) = parent_idx {
                nodes[p].children.push(idx);
            }
            index.insert(node_id.clone(), idx);
            nodes.push(Node {
                id: node_id,
                label,
                parent: parent_idx,
                children: Vec::new(),
                depth,
                height: 0,
            });
        }

        let root = root.ok_or(TreeError::NoRoot)?;

        // Parents always precede children, so a reverse sweep sees every
        // child before its parent.
        for i in (0..nodes.len()).rev() {
            if let Some(p) = nodes[i].parent {
                let h = nodes[i].height + 1;
                if h > nodes[p].height {
                    nodes[p].height = h;
                }
            }
        }
        if nodes[root].height == 0 {
            return Err(TreeError::Degenerate);
        }

        let leaves: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes[i].children.is_empty())
            .collect();
        if options.strict_layers {
            let first = leaves[0];
            if let Some(&odd) = leaves.iter().find(|&&l| nodes[l].depth != nodes[first].depth) {
                return Err(TreeError::UnevenLeaves(
                    nodes[first].id.0.clone(),
                    nodes[first].depth,
                    nodes[odd].id.0.clone(),
                    nodes[odd].depth,
                ));
            }
        }

        Ok(ConceptTree {
            nodes,
            index,
            root,
            leaves,
        })
    }

    /// Serializes the tree in the tab-separated file format.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n.parent.map_or(ROOT_MARKER, |p| self.nodes[p].id.as_str());
            out.push_str(&format!("{}\t{}\t{}\n", n.id, parent, n.label));
        }
        out
    }

    fn idx(&self, id: &str) -> Result<usize, TreeError> {
        self.index
            .get(&NodeId::from(id))
            .copied()
            .ok_or_else(|| TreeError::UnknownNode(id.to_owned()))
    }

    fn leaf_idx(&self, id: &str) -> Result<usize, TreeError> {
        let i = self.idx(id)?;
        if self.nodes[i].children.is_empty() {
            Ok(i)
        } else {
            Err(TreeError::NotALeaf(id.to_owned()))
        }
    }

    pub fn root(&self) -> &NodeId {
        &self.nodes[self.root].id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(&NodeId::from(id))
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.leaf_idx(id).is_ok()
    }

    /// All node ids in file order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter().map(|n| &n.id)
    }

    /// Leaf ids in file order.
    pub fn leaves(&self) -> impl Iterator<Item = &NodeId> {
        self.leaves.iter().map(|&i| &self.nodes[i].id)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn label(&self, id: &str) -> Result<&str, TreeError> {
        Ok(&self.nodes[self.idx(id)?].label)
    }

    pub fn parent(&self, id: &str) -> Result<Option<&NodeId>, TreeError> {
        Ok(self.nodes[self.idx(id)?].parent.map(|p| &self.nodes[p].id))
    }

    pub fn children(&self, id: &str) -> Result<impl Iterator<Item = &NodeId>, TreeError> {
        let i = self.idx(id)?;
        Ok(self.nodes[i].children.iter().map(|&c| &self.nodes[c].id))
    }

    /// Edge count from the root down to `id`.
    pub fn depth(&self, id: &str) -> Result<usize, TreeError> {
        Ok(self.nodes[self.idx(id)?].depth)
    }

    /// Edge count from `id` down to its deepest descendant leaf.
    pub fn height(&self, id: &str) -> Result<usize, TreeError> {
        Ok(self.nodes[self.idx(id)?].height)
    }

    /// Height of the root, the maximum height over all nodes.
    pub fn tree_height(&self) -> usize {
        self.nodes[self.root].height
    }

    /// Number of nodes at each depth, starting with the root layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let max_depth = self.nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        let mut sizes = vec![0; max_depth + 1];
        for n in &self.nodes {
            sizes[n.depth] += 1;
        }
        sizes
    }

    /// Ancestors of `id` from itself up to the root.
    pub fn ancestors(&self, id: &str) -> Result<Vec<&NodeId>, TreeError> {
        let mut cur = Some(self.idx(id)?);
        let mut out = Vec::new();
        while let Some(i) = cur {
            out.push(&self.nodes[i].id);
            cur = self.nodes[i].parent;
        }
        Ok(out)
    }

    fn lcs_idx(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        while self.nodes[a].depth > self.nodes[b].depth {
            a = self.nodes[a].parent.expect("non-root has parent");
        }
        while self.nodes[b].depth > self.nodes[a].depth {
            b = self.nodes[b].parent.expect("non-root has parent");
        }
        while a != b {
            a = self.nodes[a].parent.expect("non-root has parent");
            b = self.nodes[b].parent.expect("non-root has parent");
        }
        a
    }

    /// Lowest common subsumer of two leaves.
    pub fn lcs(&self, x: &str, y: &str) -> Result<&NodeId, TreeError> {
        let a = self.leaf_idx(x)?;
        let b = self.leaf_idx(y)?;
        Ok(&self.nodes[self.lcs_idx(a, b)].id)
    }

    /// `height(lcs(x, y)) / height(root)`.
    pub fn semantic_distance(&self, x: &str, y: &str) -> Result<Rational, TreeError> {
        let a = self.leaf_idx(x)?;
        let b = self.leaf_idx(y)?;
        let h = self.nodes[self.lcs_idx(a, b)].height;
        Ok(Rational::new(h as u32, self.tree_height() as u32))
    }

    /// `1 - semantic_distance(x, y)`.
    pub fn semantic_similarity(&self, x: &str, y: &str) -> Result<Rational, TreeError> {
        Ok(Rational::from_integer(1) - self.semantic_distance(x, y)?)
    }
}

/// Converts an exact ratio to `f64` at an API edge.
pub fn ratio_to_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}
