//! Binary regression trees with native continuous/categorical splits,
//! incremental leaf-assignment caching, and bit-exact text serialization.
//!
//! Nodes are addressed by heap index (root = 1, children of `k` at `2k` and
//! `2k+1`), which makes the serialized form canonical: tokens are emitted in
//! increasing index order and parsing is order-independent.
//!
//! Grammar (space-separated tokens, one tree per line):
//!
//! ```text
//! internal  n<idx>:v<var>:c<cutpoint>          continuous split, left iff x <= c
//! internal  n<idx>:v<var>:s<hex bitmask>       categorical split, left iff level in set
//! leaf      l<idx>:m<decimal>                  leaf mean
//! ```
//!
//! Reals are rendered as the shortest decimal that round-trips double
//! precision, so `parse(serialize(t))` reproduces predictions bit-for-bit.

use std::collections::BTreeMap;

use crate::data::DesignMatrix;

/// Depth bound; the structure prior makes trees this deep vanishingly
/// unlikely, this is just a hard safety cap.
pub const MAX_DEPTH: u32 = 32;

/// Set of categorical level indices routed to the left child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSet {
    words: Vec<u64>,
}

impl LevelSet {
    pub fn empty() -> Self {
        LevelSet { words: Vec::new() }
    }

    pub fn from_levels(levels: &[u32]) -> Self {
        let mut s = LevelSet::empty();
        for &l in levels {
            s.insert(l);
        }
        s
    }

    pub fn insert(&mut self, level: u32) {
        let w = (level / 64) as usize;
        if self.words.len() <= w {
            self.words.resize(w + 1, 0);
        }
        self.words[w] |= 1u64 << (level % 64);
    }

    pub fn contains(&self, level: u32) -> bool {
        let w = (level / 64) as usize;
        w < self.words.len() && self.words[w] >> (level % 64) & 1 == 1
    }

    pub fn count(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Lowercase hex, bit 0 = level 0, no leading zeros.
    pub fn to_hex(&self) -> String {
        let mut out = String::new();
        let mut started = false;
        for &w in self.words.iter().rev() {
            if started {
                out.push_str(&format!("{w:016x}"));
            } else if w != 0 {
                out.push_str(&format!("{w:x}"));
                started = true;
            }
        }
        if out.is_empty() {
            out.push('0');
        }
        out
    }

    pub fn from_hex(hex: &str) -> Option<Self> {
        if hex.is_empty() || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        let mut words = Vec::new();
        let bytes = hex.as_bytes();
        let mut i = bytes.len();
        while i > 0 {
            let start = i.saturating_sub(16);
            let chunk = std::str::from_utf8(&bytes[start..i]).ok()?;
            words.push(u64::from_str_radix(chunk, 16).ok()?);
            i = start;
        }
        while words.last() == Some(&0) {
            words.pop();
        }
        Some(LevelSet { words })
    }
}

/// Decision rule at an internal node.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitRule {
    /// Left iff `x[var] <= cutpoint` (ties go left).
    Continuous { var: usize, cutpoint: f64 },
    /// Left iff `level(x[var])` is in `left_levels`.
    Categorical { var: usize, left_levels: LevelSet },
}

impl SplitRule {
    pub fn var(&self) -> usize {
        match self {
            SplitRule::Continuous { var, .. } => *var,
            SplitRule::Categorical { var, .. } => *var,
        }
    }

    /// True iff the row goes to the left child.
    pub fn goes_left(&self, design: &DesignMatrix, row: usize) -> bool {
        match self {
            SplitRule::Continuous { var, cutpoint } => {
                design.continuous_value(row, *var) <= *cutpoint
            }
            SplitRule::Categorical { var, left_levels } => {
                left_levels.contains(design.level(row, *var))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Internal(SplitRule),
    Leaf { mean: f64 },
}

/// A binary regression tree; leaf means are in standardized-outcome units.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: BTreeMap<u64, Node>,
}

impl RegressionTree {
    /// Single-leaf tree.
    pub fn stump(mean: f64) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(1, Node::Leaf { mean });
        RegressionTree { nodes }
    }

    pub fn node(&self, idx: u64) -> Option<&Node> {
        self.nodes.get(&idx)
    }

    pub fn is_leaf(&self, idx: u64) -> bool {
        matches!(self.nodes.get(&idx), Some(Node::Leaf { .. }))
    }

    pub fn leaf_mean(&self, idx: u64) -> Option<f64> {
        match self.nodes.get(&idx) {
            Some(Node::Leaf { mean }) => Some(*mean),
            _ => None,
        }
    }

    pub fn set_leaf_mean(&mut self, idx: u64, mean: f64) {
        match self.nodes.get_mut(&idx) {
            Some(Node::Leaf { mean: m }) => *m = mean,
            _ => panic!("node {idx} is not a leaf"),
        }
    }

    /// Heap indices of all leaves, ascending.
    pub fn leaves(&self) -> Vec<u64> {
        self.nodes
            .iter()
            .filter_map(|(&i, n)| match n {
                Node::Leaf { .. } => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Internal nodes whose children are both leaves ("no grandchildren").
    pub fn prunable_nodes(&self) -> Vec<u64> {
        self.nodes
            .iter()
            .filter_map(|(&i, n)| match n {
                Node::Internal(_) if self.is_leaf(2 * i) && self.is_leaf(2 * i + 1) => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .values()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn is_stump(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Depth of a heap index (root = 0).
    pub fn depth(idx: u64) -> u32 {
        63 - idx.leading_zeros()
    }

    /// Variables used by internal splits, with multiplicity.
    pub fn split_vars(&self) -> Vec<usize> {
        self.nodes
            .values()
            .filter_map(|n| match n {
                Node::Internal(r) => Some(r.var()),
                _ => None,
            })
            .collect()
    }

    /// Leaf reached by descending the split rules for one design row.
    pub fn assign_leaf(&self, design: &DesignMatrix, row: usize) -> u64 {
        let mut idx = 1u64;
        loop {
            match &self.nodes[&idx] {
                Node::Leaf { .. } => return idx,
                Node::Internal(rule) => {
                    idx = if rule.goes_left(design, row) {
                        2 * idx
                    } else {
                        2 * idx + 1
                    };
                }
            }
        }
    }

    pub fn predict_row(&self, design: &DesignMatrix, row: usize) -> f64 {
        self.leaf_mean(self.assign_leaf(design, row)).unwrap()
    }

    /// Replace leaf `leaf` by an internal node with two fresh leaves.
    /// Structural only; membership updates live in [`LeafAssignment`].
    fn split_leaf(&mut self, leaf: u64, rule: SplitRule, left_mean: f64, right_mean: f64) {
        debug_assert!(self.is_leaf(leaf));
        self.nodes.insert(leaf, Node::Internal(rule));
        self.nodes.insert(2 * leaf, Node::Leaf { mean: left_mean });
        self.nodes.insert(2 * leaf + 1, Node::Leaf { mean: right_mean });
    }

    /// Collapse an internal node whose children are both leaves.
    fn collapse(&mut self, node: u64, mean: f64) {
        debug_assert!(self.is_leaf(2 * node) && self.is_leaf(2 * node + 1));
        self.nodes.remove(&(2 * node));
        self.nodes.remove(&(2 * node + 1));
        self.nodes.insert(node, Node::Leaf { mean });
    }

    fn validate(&self) -> Result<(), String> {
        if !self.nodes.contains_key(&1) {
            return Err("missing root node".into());
        }
        for (&i, n) in &self.nodes {
            if i > 1 && !self.nodes.contains_key(&(i / 2)) {
                return Err(format!("node {i} has no parent"));
            }
            if i > 1 {
                match self.nodes.get(&(i / 2)) {
                    Some(Node::Internal(_)) => {}
                    _ => return Err(format!("parent of node {i} is not internal")),
                }
            }
            match n {
                Node::Internal(_) => {
                    if !self.nodes.contains_key(&(2 * i)) || !self.nodes.contains_key(&(2 * i + 1))
                    {
                        return Err(format!("internal node {i} lacks two children"));
                    }
                }
                Node::Leaf { .. } => {
                    if self.nodes.contains_key(&(2 * i)) {
                        return Err(format!("leaf {i} has children"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-leaf sufficient statistics with respect to a residual vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LeafStats {
    pub n: u64,
    pub sum: f64,
}

/// Cached observation-to-leaf map for one tree over a fixed row set.
///
/// Membership lists are kept in ascending row order so that incremental
/// updates accumulate floating-point sums in the same order a from-scratch
/// pass would.
#[derive(Debug, Clone)]
pub struct LeafAssignment {
    members: BTreeMap<u64, Vec<u32>>,
    stats: BTreeMap<u64, LeafStats>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TreeOpError {
    /// A proposed child would receive zero observations; the caller treats
    /// the move as rejectable.
    #[error("proposed split leaves a child empty")]
    EmptyChild,
    #[error("node {0} is not a terminal leaf")]
    NotALeaf(u64),
    #[error("children of node {0} are not both leaves")]
    NotPrunable(u64),
    #[error("depth cap {MAX_DEPTH} reached")]
    DepthCap,
}

impl LeafAssignment {
    /// Full root-to-leaf traversal of every row; the oracle every
    /// incremental update must agree with.
    pub fn from_scratch(
        tree: &RegressionTree,
        design: &DesignMatrix,
        rows: &[u32],
        resid: &[f64],
    ) -> Self {
        let mut members: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
        for &leaf in &tree.leaves() {
            members.insert(leaf, Vec::new());
        }
        for &r in rows {
            let leaf = tree.assign_leaf(design, r as usize);
            members.get_mut(&leaf).unwrap().push(r);
        }
        let stats = members
            .iter()
            .map(|(&leaf, m)| {
                let mut s = LeafStats::default();
                for &r in m {
                    s.n += 1;
                    s.sum += resid[r as usize];
                }
                (leaf, s)
            })
            .collect();
        LeafAssignment { members, stats }
    }

    pub fn members(&self, leaf: u64) -> &[u32] {
        self.members
            .get(&leaf)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn stats(&self, leaf: u64) -> LeafStats {
        self.stats.get(&leaf).copied().unwrap_or_default()
    }

    pub fn set_stats(&mut self, leaf: u64, stats: LeafStats) {
        self.stats.insert(leaf, stats);
    }

    pub fn leaves(&self) -> Vec<u64> {
        self.members.keys().copied().collect()
    }

    pub fn total_rows(&self) -> usize {
        self.members.values().map(|m| m.len()).sum()
    }
}

/// Split a terminal leaf; only that leaf's members are re-routed and
/// sufficient statistics move by transfer, not global recomputation.
///
/// New leaf means start at the parent's mean (the sampler redraws them).
pub fn grow(
    tree: &mut RegressionTree,
    asg: &mut LeafAssignment,
    leaf: u64,
    rule: SplitRule,
    design: &DesignMatrix,
    resid: &[f64],
) -> Result<(), TreeOpError> {
    if !tree.is_leaf(leaf) {
        return Err(TreeOpError::NotALeaf(leaf));
    }
    if RegressionTree::depth(leaf) >= MAX_DEPTH {
        return Err(TreeOpError::DepthCap);
    }
    let members = asg.members(leaf);
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut left_stats = LeafStats::default();
    for &r in members {
        if rule.goes_left(design, r as usize) {
            left_stats.n += 1;
            left_stats.sum += resid[r as usize];
            left.push(r);
        } else {
            right.push(r);
        }
    }
    if left.is_empty() || right.is_empty() {
        return Err(TreeOpError::EmptyChild);
    }
    let parent_stats = asg.stats(leaf);
    let right_stats = LeafStats {
        n: parent_stats.n - left_stats.n,
        sum: parent_stats.sum - left_stats.sum,
    };
    let mean = tree.leaf_mean(leaf).unwrap();
    tree.split_leaf(leaf, rule, mean, mean);
    asg.members.remove(&leaf);
    asg.stats.remove(&leaf);
    asg.members.insert(2 * leaf, left);
    asg.members.insert(2 * leaf + 1, right);
    asg.stats.insert(2 * leaf, left_stats);
    asg.stats.insert(2 * leaf + 1, right_stats);
    Ok(())
}

/// Collapse an internal node whose children are both leaves; memberships and
/// statistics merge by addition. The merged leaf keeps the left child's
/// mean until the sampler redraws it.
pub fn prune(
    tree: &mut RegressionTree,
    asg: &mut LeafAssignment,
    node: u64,
) -> Result<(), TreeOpError> {
    let (l, r) = (2 * node, 2 * node + 1);
    if !(tree.is_leaf(l) && tree.is_leaf(r)) {
        return Err(TreeOpError::NotPrunable(node));
    }
    let left_members = asg.members.remove(&l).unwrap_or_default();
    let right_members = asg.members.remove(&r).unwrap_or_default();
    // merge two ascending lists, preserving ascending order
    let mut merged = Vec::with_capacity(left_members.len() + right_members.len());
    let (mut i, mut j) = (0, 0);
    while i < left_members.len() && j < right_members.len() {
        if left_members[i] < right_members[j] {
            merged.push(left_members[i]);
            i += 1;
        } else {
            merged.push(right_members[j]);
            j += 1;
        }
    }
    merged.extend_from_slice(&left_members[i..]);
    merged.extend_from_slice(&right_members[j..]);
    let ls = asg.stats.remove(&l).unwrap_or_default();
    let rs = asg.stats.remove(&r).unwrap_or_default();
    let mean = tree.leaf_mean(l).unwrap();
    tree.collapse(node, mean);
    asg.members.insert(node, merged);
    asg.stats.insert(
        node,
        LeafStats {
            n: ls.n + rs.n,
            sum: ls.sum + rs.sum,
        },
    );
    Ok(())
}

/// Parse failure with the byte offset of the offending token.
#[derive(Debug, thiserror::Error, PartialEq)]
#[error("parse error at byte {offset}: {reason}")]
pub struct ParseError {
    pub offset: usize,
    pub reason: String,
}

/// Render one tree as a single text line.
pub fn serialize_tree(tree: &RegressionTree) -> String {
    let mut out = String::new();
    for (&idx, node) in &tree.nodes {
        if !out.is_empty() {
            out.push(' ');
        }
        match node {
            Node::Internal(SplitRule::Continuous { var, cutpoint }) => {
                out.push_str(&format!("n{idx}:v{var}:c{cutpoint}"));
            }
            Node::Internal(SplitRule::Categorical { var, left_levels }) => {
                out.push_str(&format!("n{idx}:v{var}:s{}", left_levels.to_hex()));
            }
            Node::Leaf { mean } => {
                out.push_str(&format!("l{idx}:m{mean}"));
            }
        }
    }
    out
}

/// Inverse of [`serialize_tree`]; total on serializer output.
pub fn parse_tree(line: &str) -> Result<RegressionTree, ParseError> {
    let mut nodes = BTreeMap::new();
    let mut offset = 0usize;
    for token in line.split(' ') {
        if token.is_empty() {
            offset += 1;
            continue;
        }
        let err = |reason: &str| ParseError {
            offset,
            reason: reason.to_string(),
        };
        let body = &token[1..];
        match token.as_bytes()[0] {
            b'l' => {
                let (idx_s, mean_s) = body
                    .split_once(":m")
                    .ok_or_else(|| err("leaf token missing :m"))?;
                let idx: u64 = idx_s.parse().map_err(|_| err("bad leaf index"))?;
                let mean: f64 = mean_s.parse().map_err(|_| err("bad leaf mean"))?;
                if nodes.insert(idx, Node::Leaf { mean }).is_some() {
                    return Err(err("duplicate node index"));
                }
            }
            b'n' => {
                let (idx_s, rest) = body
                    .split_once(":v")
                    .ok_or_else(|| err("internal token missing :v"))?;
                let idx: u64 = idx_s.parse().map_err(|_| err("bad node index"))?;
                let rule = if let Some((var_s, cut_s)) = rest.split_once(":c") {
                    let var: usize = var_s.parse().map_err(|_| err("bad variable index"))?;
                    let cutpoint: f64 = cut_s.parse().map_err(|_| err("bad cutpoint"))?;
                    SplitRule::Continuous { var, cutpoint }
                } else if let Some((var_s, hex)) = rest.split_once(":s") {
                    let var: usize = var_s.parse().map_err(|_| err("bad variable index"))?;
                    let left_levels =
                        LevelSet::from_hex(hex).ok_or_else(|| err("bad level bitmask"))?;
                    SplitRule::Categorical { var, left_levels }
                } else {
                    return Err(err("internal token missing :c or :s"));
                };
                if nodes.insert(idx, Node::Internal(rule)).is_some() {
                    return Err(err("duplicate node index"));
                }
            }
            _ => return Err(err("token must start with n or l")),
        }
        offset += token.len() + 1;
    }
    let tree = RegressionTree { nodes };
    tree.validate().map_err(|reason| ParseError {
        offset: 0,
        reason,
    })?;
    Ok(tree)
}

/// Forest file header: `flexcausal-forest v1 <mu|tau> trees=<M> draws=<D> p=<P>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForestHeader {
    pub tag: ForestTag,
    pub trees: usize,
    pub draws: usize,
    pub p: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForestTag {
    Mu,
    Tau,
}

impl ForestHeader {
    pub fn to_line(&self) -> String {
        let tag = match self.tag {
            ForestTag::Mu => "mu",
            ForestTag::Tau => "tau",
        };
        format!(
            "flexcausal-forest v1 {tag} trees={} draws={} p={}",
            self.trees, self.draws, self.p
        )
    }

    pub fn parse(line: &str) -> Result<Self, ParseError> {
        let err = |reason: &str| ParseError {
            offset: 0,
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 6 || parts[0] != "flexcausal-forest" || parts[1] != "v1" {
            return Err(err("bad forest header"));
        }
        let tag = match parts[2] {
            "mu" => ForestTag::Mu,
            "tau" => ForestTag::Tau,
            _ => return Err(err("forest tag must be mu or tau")),
        };
        let field = |s: &str, key: &str| -> Result<usize, ParseError> {
            s.strip_prefix(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ParseError {
                    offset: 0,
                    reason: format!("bad header field {s}"),
                })
        };
        Ok(ForestHeader {
            tag,
            trees: field(parts[3], "trees=")?,
            draws: field(parts[4], "draws=")?,
            p: field(parts[5], "p=")?,
        })
    }
}
