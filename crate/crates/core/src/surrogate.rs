//! Local entropy decision tree fitted to black-box labels on a neighborhood.
//!
//! Splits maximize information gain. Numeric candidates are midpoints between
//! consecutive distinct values (`value <= threshold` goes left); categorical
//! candidates are one-vs-rest membership tests (`value == category` goes
//! left). Immutable features are never offered as split candidates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blackbox::argmax;
use crate::dataset::FeatureSchema;
use crate::error::{Error, Result};
use crate::neighborhood::NeighborSet;

/// Gains closer than this are treated as equal when ranking candidate splits.
pub const GAIN_TIE_TOLERANCE: f64 = 1e-12;

/// Shannon entropy in bits of a class-count vector, with `0 log 0 = 0`.
pub fn entropy(counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("entropy of empty counts".into()));
    }
    Ok(entropy_unchecked(counts, total))
}

fn entropy_unchecked(counts: &[usize], total: usize) -> f64 {
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Information gain of splitting `parent` into `left` and `right`.
pub fn information_gain(parent: &[usize], left: &[usize], right: &[usize]) -> f64 {
    let n: usize = parent.iter().sum();
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    if n == 0 || nl == 0 || nr == 0 {
        return 0.0;
    }
    entropy_unchecked(parent, n)
        - (nl as f64 / n as f64) * entropy_unchecked(left, nl)
        - (nr as f64 / n as f64) * entropy_unchecked(right, nr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SplitTest {
    /// `value <= value` goes left.
    Threshold { value: f64 },
    /// Membership in the category set goes left.
    Membership { categories: Vec<usize> },
}

impl SplitTest {
    pub fn goes_left(&self, v: f64) -> bool {
        match self {
            SplitTest::Threshold { value } => v <= *value,
            SplitTest::Membership { categories } => categories.contains(&(v as usize)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub test: SplitTest,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Internal {
        feature: usize,
        test: SplitTest,
        left: usize,
        right: usize,
    },
    Leaf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub depth: usize,
    /// Training class counts of the samples reaching this node.
    pub counts: Vec<usize>,
    /// Majority class of `counts`, ties to the lowest class.
    pub label: usize,
    pub kind: NodeKind,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf)
    }

    pub fn support(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn children(&self) -> Option<(usize, usize)> {
        match self.kind {
            NodeKind::Internal { left, right, .. } => Some((left, right)),
            NodeKind::Leaf => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 6,
            min_samples_leaf: 5,
        }
    }
}

/// Binary decision tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTree {
    nodes: Vec<TreeNode>,
    class_count: usize,
    config: TreeConfig,
    excluded_features: Vec<usize>,
    feature_names: Vec<String>,
}

struct Grower<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [usize],
    schema: &'a [FeatureSchema],
    candidates: Vec<usize>,
    class_count: usize,
    config: &'a TreeConfig,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        idx.iter().for_each(|&i| counts[self.labels[i]] += 1);
        counts
    }

    fn grow(&mut self, idx: Vec<usize>, parent: Option<usize>, depth: usize) -> usize {
        let counts = self.counts(&idx);
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            parent,
            depth,
            label: argmax_counts(&counts),
            counts: counts.clone(),
            kind: NodeKind::Leaf,
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure
            || depth >= self.config.max_depth
            || idx.len() < 2 * self.config.min_samples_leaf.max(1)
        {
            return id;
        }
        let Some(split) = best_split(
            self.rows,
            self.labels,
            &idx,
            self.schema,
            &self.candidates,
            self.class_count,
            self.config.min_samples_leaf,
        ) else {
            return id;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| split.test.goes_left(self.rows[i][split.feature]));
        let left = self.grow(left_idx, Some(id), depth + 1);
        let right = self.grow(right_idx, Some(id), depth + 1);
        self.nodes[id].kind = NodeKind::Internal {
            feature: split.feature,
            test: split.test,
            left,
            right,
        };
        id
    }
}

fn argmax_counts(counts: &[usize]) -> usize {
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    argmax(&as_f)
}

/// Highest-gain admissible split of the rows `idx`, or `None` when no split
/// has positive gain. Ties go to the lower feature index, then the smaller
/// threshold or category index.
pub fn best_split(
    rows: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
    schema: &[FeatureSchema],
    candidates: &[usize],
    class_count: usize,
    min_samples_leaf: usize,
) -> Option<Split> {
    let n = idx.len();
    let mut parent = vec![0; class_count];
    idx.iter().for_each(|&i| parent[labels[i]] += 1);
    let min_leaf = min_samples_leaf.max(1);
    let mut best: Option<Split> = None;
    let mut consider = |feature: usize, test: SplitTest, gain: f64| {
        if gain <= GAIN_TIE_TOLERANCE {
            return;
        }
        if best
            .as_ref()
            .is_none_or(|b| gain > b.gain + GAIN_TIE_TOLERANCE)
        {
            best = Some(Split {
                feature,
                test,
                gain,
            });
        }
    };
    let mut order = idx.to_vec();
    for &feature in candidates {
        match schema[feature].categories() {
            None => {
                order.sort_by(|&a, &b| rows[a][feature].total_cmp(&rows[b][feature]));
                let mut left = vec![0; class_count];
                for p in 0..n - 1 {
                    left[labels[order[p]]] += 1;
                    let lo = rows[order[p]][feature];
                    let hi = rows[order[p + 1]][feature];
                    if lo == hi || p + 1 < min_leaf || n - p - 1 < min_leaf {
                        continue;
                    }
                    let right: Vec<usize> = parent.iter().zip(&left).map(|(a, b)| a - b).collect();
                    consider(
                        feature,
                        SplitTest::Threshold {
                            value: midpoint(lo, hi),
                        },
                        information_gain(&parent, &left, &right),
                    );
                }
            }
            Some(categories) => {
                let mut per_category = vec![vec![0; class_count]; categories.len()];
                idx.iter()
                    .for_each(|&i| per_category[rows[i][feature] as usize][labels[i]] += 1);
                for (c, left) in per_category.iter().enumerate() {
                    let nl: usize = left.iter().sum();
                    if nl < min_leaf || n - nl < min_leaf {
                        continue;
                    }
                    let right: Vec<usize> = parent.iter().zip(left).map(|(a, b)| a - b).collect();
                    consider(
                        feature,
                        SplitTest::Membership {
                            categories: vec![c],
                        },
                        information_gain(&parent, left, &right),
                    );
                }
            }
        }
    }
    best
}

/// Midpoint of two consecutive distinct values that still separates them.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

impl SurrogateTree {
    /// Fits a tree on arbitrary labeled rows.
    pub fn fit(
        rows: &[Vec<f64>],
        labels: &[usize],
        class_count: usize,
        schema: &[FeatureSchema],
        config: &TreeConfig,
    ) -> Result<Self> {
        if rows.is_empty() || rows.len() != labels.len() {
            return Err(Error::InvalidArgument(
                "tree needs equally many rows and labels".into(),
            ));
        }
        if labels.iter().any(|&l| l >= class_count) {
            return Err(Error::InvalidArgument("label outside class range".into()));
        }
        let first = labels[0];
        if labels.iter().all(|&l| l == first) {
            return Err(Error::SingleClass);
        }
        let candidates: Vec<usize> = (0..schema.len())
            .filter(|&j| !schema[j].is_immutable())
            .collect();
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("every feature is immutable".into()));
        }
        let mut grower = Grower {
            rows,
            labels,
            schema,
            candidates,
            class_count,
            config,
            nodes: Vec::new(),
        };
        grower.grow((0..rows.len()).collect(), None, 0);
        Ok(SurrogateTree {
            nodes: grower.nodes,
            class_count,
            config: config.clone(),
            excluded_features: (0..schema.len())
                .filter(|&j| schema[j].is_immutable())
                .collect(),
            feature_names: schema.iter().map(|f| f.name.clone()).collect(),
        })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn excluded_features(&self) -> &[usize] {
        &self.excluded_features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf())
            .map(|(i, _)| i)
    }

    /// Leaf reached by routing `values` from the root.
    pub fn leaf_of(&self, values: &[f64]) -> usize {
        let mut id = 0;
        while let NodeKind::Internal {
            feature,
            test,
            left,
            right,
        } = &self.nodes[id].kind
        {
            id = if test.goes_left(values[*feature]) {
                *left
            } else {
                *right
            };
        }
        id
    }

    pub fn predict(&self, values: &[f64]) -> usize {
        self.nodes[self.leaf_of(values)].label
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_from_root(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Whether `child` is the left child of its parent.
    pub fn is_left_child(&self, child: usize) -> Option<bool> {
        let parent = self.nodes[child].parent?;
        self.nodes[parent].children().map(|(l, _)| l == child)
    }

    /// Bottom-up reduced-error pruning: an internal node becomes a leaf when
    /// doing so does not increase its errors on the evaluation rows.
    pub fn prune(&self, rows: &[Vec<f64>], labels: &[usize]) -> SurrogateTree {
        let mut leaf_errors = vec![0usize; self.nodes.len()];
        for (row, &y) in rows.iter().zip(labels) {
            let mut id = 0;
            loop {
                if self.nodes[id].label != y {
                    leaf_errors[id] += 1;
                }
                match &self.nodes[id].kind {
                    NodeKind::Internal {
                        feature,
                        test,
                        left,
                        right,
                    } => {
                        id = if test.goes_left(row[*feature]) {
                            *left
                        } else {
                            *right
                        }
                    }
                    NodeKind::Leaf => break,
                }
            }
        }
        let mut collapsed = vec![false; self.nodes.len()];
        self.prune_node(0, &leaf_errors, &mut collapsed);
        self.compact(&collapsed)
    }

    fn prune_node(&self, id: usize, leaf_errors: &[usize], collapsed: &mut [bool]) -> usize {
        match self.nodes[id].children() {
            None => leaf_errors[id],
            Some((l, r)) => {
                let subtree = self.prune_node(l, leaf_errors, collapsed)
                    + self.prune_node(r, leaf_errors, collapsed);
                if leaf_errors[id] <= subtree {
                    collapsed[id] = true;
                    leaf_errors[id]
                } else {
                    subtree
                }
            }
        }
    }

    fn compact(&self, collapsed: &[bool]) -> SurrogateTree {
        let mut nodes = Vec::new();
        self.copy_node(0, None, collapsed, &mut nodes);
        SurrogateTree {
            nodes,
            class_count: self.class_count,
            config: self.config.clone(),
            excluded_features: self.excluded_features.clone(),
            feature_names: self.feature_names.clone(),
        }
    }

    fn copy_node(
        &self,
        id: usize,
        parent: Option<usize>,
        collapsed: &[bool],
        out: &mut Vec<TreeNode>,
    ) -> usize {
        let src = &self.nodes[id];
        let new_id = out.len();
        out.push(TreeNode {
            parent,
            kind: NodeKind::Leaf,
            ..src.clone()
        });
        if let (
            false,
            NodeKind::Internal {
                feature,
                test,
                left,
                right,
            },
        ) = (collapsed[id], &src.kind)
        {
            let l = self.copy_node(*left, Some(new_id), collapsed, out);
            let r = self.copy_node(*right, Some(new_id), collapsed, out);
            out[new_id].kind = NodeKind::Internal {
                feature: *feature,
                test: test.clone(),
                left: l,
                right: r,
            };
        }
        new_id
    }
}

/// Fits the surrogate on a neighborhood, labels supplied by the black box.
pub fn fit_tree(
    neighbors: &NeighborSet,
    schema: &[FeatureSchema],
    config: &TreeConfig,
) -> Result<SurrogateTree> {
    let rows: Vec<Vec<f64>> = neighbors.members.iter().map(|m| m.values.clone()).collect();
    let labels: Vec<usize> = neighbors.members.iter().map(|m| m.label).collect();
    let class_count = neighbors.fact_label.max(neighbors.contrast_label) + 1;
    SurrogateTree::fit(&rows, &labels, class_count, schema, config)
}

/// Fraction of neighborhood members on which the tree agrees with the black-box label.
pub fn fidelity(tree: &SurrogateTree, eval_set: &NeighborSet) -> f64 {
    if eval_set.members.is_empty() {
        return 0.0;
    }
    let hits = eval_set
        .members
        .iter()
        .filter(|m| tree.predict(&m.values) == m.label)
        .count();
    hits as f64 / eval_set.members.len() as f64
}

pub fn prune(tree: &SurrogateTree, eval_set: &NeighborSet) -> SurrogateTree {
    let rows: Vec<Vec<f64>> = eval_set.members.iter().map(|m| m.values.clone()).collect();
    let labels: Vec<usize> = eval_set.members.iter().map(|m| m.label).collect();
    tree.prune(&rows, &labels)
}

pub const TREE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub label: usize,
    pub counts: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
    /// `"<="` for thresholds, `"in"` for category membership.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub left: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub right: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub schema_version: u32,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub excluded_features: Vec<String>,
    pub nodes: Vec<NodeDocument>,
}

impl SurrogateTree {
    pub fn to_document(&self, schema: &[FeatureSchema]) -> TreeDocument {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                let mut doc = NodeDocument {
                    id,
                    parent: n.parent,
                    depth: n.depth,
                    label: n.label,
                    counts: n.counts.clone(),
                    feature: None,
                    operator: None,
                    threshold: None,
                    categories: None,
                    left: None,
                    right: None,
                };
                if let NodeKind::Internal {
                    feature,
                    test,
                    left,
                    right,
                } = &n.kind
                {
                    doc.feature = Some(schema[*feature].name.clone());
                    doc.left = Some(*left);
                    doc.right = Some(*right);
                    match test {
                        SplitTest::Threshold { value } => {
                            doc.operator = Some("<=".into());
                            doc.threshold = Some(*value);
                        }
                        SplitTest::Membership { categories } => {
                            doc.operator = Some("in".into());
                            doc.categories = Some(
                                categories
                                    .iter()
                                    .map(|&c| schema[*feature].display_value(c as f64))
                                    .collect(),
                            );
                        }
                    }
                }
                doc
            })
            .collect();
        TreeDocument {
            schema_version: TREE_SCHEMA_VERSION,
            max_depth: self.config.max_depth,
            min_samples_leaf: self.config.min_samples_leaf,
            excluded_features: self
                .excluded_features
                .iter()
                .map(|&j| schema[j].name.clone())
                .collect(),
            nodes,
        }
    }

    /// Indented if/else dump of the tree.
    pub fn rules_text(&self, schema: &[FeatureSchema]) -> String {
        let mut out = String::new();
        self.write_rules(0, 0, schema, &mut out);
        out
    }

    fn write_rules(&self, id: usize, indent: usize, schema: &[FeatureSchema], out: &mut String) {
        let pad = "  ".repeat(indent);
        let node = &self.nodes[id];
        match &node.kind {
            NodeKind::Leaf => {
                let _ = writeln!(out, "{pad}class {} {:?}", node.label, node.counts);
            }
            NodeKind::Internal {
                feature,
                test,
                left,
                right,
            } => {
                let f = &schema[*feature];
                let (yes, no) = match test {
                    SplitTest::Threshold { value } => (
                        format!("{} <= {value}", f.name),
                        format!("{} > {value}", f.name),
                    ),
                    SplitTest::Membership { categories } => {
                        let names: Vec<String> = categories
                            .iter()
                            .map(|&c| f.display_value(c as f64))
                            .collect();
                        (
                            format!("{} = {}", f.name, names.join("|")),
                            format!("{} != {}", f.name, names.join("|")),
                        )
                    }
                };
                let _ = writeln!(out, "{pad}if {yes}:");
                self.write_rules(*left, indent + 1, schema, out);
                let _ = writeln!(out, "{pad}if {no}:");
                self.write_rules(*right, indent + 1, schema, out);
            }
        }
    }
}
