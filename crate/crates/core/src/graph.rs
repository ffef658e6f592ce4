//! Contrast graph over surrogate tree nodes and the shortest-path search from
//! the anchor's leaf to every contrast-labeled leaf.
//!
//! Each tree edge yields a zero-cost upward edge and a downward edge carrying
//! the child's branch condition. A downward edge is free when the anchor
//! already satisfies the condition, costs the feature's edit cost when the
//! change is allowed, and is absent when the change is forbidden. The search
//! charges each feature at most once per path, so a path's cost is the
//! weighted count of features that must change.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Direction, FeatureSchema, Mutability};
use crate::error::{Error, Result};
use crate::surrogate::{NodeKind, SplitTest, SurrogateTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexTag {
    FactLeaf,
    ContrastLeaf,
    Internal,
}

/// Branch condition of a tree node relative to its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub feature: usize,
    pub test: SplitTest,
    /// True for the left branch, where the test holds.
    pub holds: bool,
}

impl Condition {
    pub fn satisfied_by(&self, value: f64) -> bool {
        self.test.goes_left(value) == self.holds
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Cost of taking this edge when its feature has not been charged yet.
    pub weight: f64,
    /// Present on downward edges only.
    pub condition: Option<Condition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastGraph {
    pub tags: Vec<VertexTag>,
    pub edges: Vec<Edge>,
    /// Outgoing edge indices per vertex.
    pub adjacency: Vec<Vec<usize>>,
    pub u_start: usize,
    pub fact_label: usize,
    pub contrast_label: usize,
    anchor: Vec<f64>,
    schema: Vec<FeatureSchema>,
    tree: SurrogateTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl Operator {
    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Gt => ">",
            Operator::Le => "<=",
            Operator::Eq => "=",
            Operator::Ne => "!=",
        }
    }

    pub fn holds(self, value: f64, reference: f64) -> bool {
        match self {
            Operator::Gt => value > reference,
            Operator::Le => value <= reference,
            Operator::Eq => value == reference,
            Operator::Ne => value != reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub feature: usize,
    pub feature_name: String,
    pub operator: Operator,
    /// Threshold, or category index for categorical rules.
    pub value: f64,
    /// Threshold as text, or the category name.
    pub display: String,
}

impl Rule {
    pub fn holds(&self, values: &[f64]) -> bool {
        self.operator.holds(values[self.feature], self.value)
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {}",
            self.feature_name,
            self.operator.symbol(),
            self.display
        )
    }
}

/// Region a changed feature must land in to reach the target leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Region {
    /// `lower < value <= upper`; missing bounds are unbounded.
    Interval {
        lower: Option<f64>,
        upper: Option<f64>,
    },
    /// Allowed category indices in ascending order.
    Categories { allowed: Vec<usize> },
}

impl Region {
    pub fn contains(&self, value: f64) -> bool {
        match self {
            Region::Interval { lower, upper } => {
                lower.is_none_or(|l| value > l) && upper.is_none_or(|u| value <= u)
            }
            Region::Categories { allowed } => allowed.contains(&(value as usize)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRegion {
    pub feature: usize,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPath {
    pub target: usize,
    pub cost: f64,
    /// Merged violated conditions, ordered by feature index.
    pub rules: Vec<Rule>,
    /// Full merged region of every changed feature, ordered by feature index.
    pub regions: Vec<FeatureRegion>,
    /// Vertices from the start leaf to the target.
    pub vertices: Vec<usize>,
}

impl ContrastPath {
    pub fn changed_features(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.feature).collect()
    }

    /// Whether `values` satisfy every rule and fall in every merged region.
    pub fn satisfied_by(&self, values: &[f64]) -> bool {
        self.rules.iter().all(|r| r.holds(values))
            && self
                .regions
                .iter()
                .all(|r| r.region.contains(values[r.feature]))
    }

    /// Canonical rule set, used to tell candidates apart.
    pub fn rule_key(&self) -> String {
        self.rules
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

/// Leaf containing `x` and whether its label agrees with the fact class.
pub fn locate_fact_leaf(tree: &SurrogateTree, x: &[f64], fact_label: usize) -> (usize, bool) {
    let leaf = tree.leaf_of(x);
    (leaf, tree.node(leaf).label == fact_label)
}

/// Whether some value meeting `condition` is reachable from `from` under `mutability`.
fn change_allowed(feature: &FeatureSchema, condition: &Condition, from: f64) -> bool {
    match (&feature.mutability, &condition.test) {
        (Mutability::Mutable, _) => true,
        (Mutability::Immutable, _) => false,
        (m, SplitTest::Threshold { .. }) => {
            // x violates the condition, so the required move is away from x
            // towards the condition's side
            let direction = m.direction().expect("semi-immutable has a direction");
            let increase = !condition.holds;
            match direction {
                Direction::IncreaseOnly => increase,
                Direction::DecreaseOnly => !increase,
            }
        }
        (m, SplitTest::Membership { .. }) => {
            let n = feature.categories().map_or(0, <[String]>::len);
            (0..n).any(|c| condition.satisfied_by(c as f64) && m.allows(from, c as f64))
        }
    }
}

pub fn build_graph(
    tree: &SurrogateTree,
    x: &[f64],
    schema: &[FeatureSchema],
    fact_label: usize,
    contrast_label: usize,
) -> Result<ContrastGraph> {
    if x.len() != schema.len() {
        return Err(Error::Dimension {
            expected: schema.len(),
            got: x.len(),
        });
    }
    let n = tree.len();
    let (u_start, _) = locate_fact_leaf(tree, x, fact_label);
    let tags = tree
        .nodes()
        .iter()
        .map(
            |node| match (node.is_leaf(), node.label == contrast_label) {
                (false, _) => VertexTag::Internal,
                (true, true) => VertexTag::ContrastLeaf,
                (true, false) => VertexTag::FactLeaf,
            },
        )
        .collect();
    let mut edges = Vec::new();
    let mut adjacency = vec![Vec::new(); n];
    for (parent, node) in tree.nodes().iter().enumerate() {
        let NodeKind::Internal {
            feature,
            test,
            left,
            right,
        } = &node.kind
        else {
            continue;
        };
        for (child, holds) in [(*left, true), (*right, false)] {
            let condition = Condition {
                feature: *feature,
                test: test.clone(),
                holds,
            };
            let spec = &schema[*feature];
            let xv = x[*feature];
            let weight = if condition.satisfied_by(xv) {
                Some(0.0)
            } else if change_allowed(spec, &condition, xv) {
                Some(spec.edit_cost)
            } else {
                None
            };
            if let Some(weight) = weight {
                adjacency[parent].push(edges.len());
                edges.push(Edge {
                    from: parent,
                    to: child,
                    weight,
                    condition: Some(condition),
                });
            }
            adjacency[child].push(edges.len());
            edges.push(Edge {
                from: child,
                to: parent,
                weight: 0.0,
                condition: None,
            });
        }
    }
    Ok(ContrastGraph {
        tags,
        edges,
        adjacency,
        u_start,
        fact_label,
        contrast_label,
        anchor: x.to_vec(),
        schema: schema.to_vec(),
        tree: tree.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueItem {
    cost: f64,
    vertex: usize,
}

impl Eq for QueueItem {}

impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Label {
    cost: f64,
    predecessor: Option<usize>,
    charged: Vec<bool>,
}

impl ContrastGraph {
    pub fn vertex_count(&self) -> usize {
        self.tags.len()
    }

    pub fn tree(&self) -> &SurrogateTree {
        &self.tree
    }

    pub fn schema(&self) -> &[FeatureSchema] {
        &self.schema
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    /// Dijkstra from `u_start`; every reachable contrast leaf other than the
    /// start with its minimal cost, ranked by cost, then rule count, then
    /// leaf id.
    pub fn shortest_paths(&self) -> Vec<ContrastPath> {
        let n = self.vertex_count();
        let n_features = self.schema.len();
        let mut labels: Vec<Option<Label>> = vec![None; n];
        let mut settled = vec![false; n];
        let mut heap = BinaryHeap::new();
        labels[self.u_start] = Some(Label {
            cost: 0.0,
            predecessor: None,
            charged: vec![false; n_features],
        });
        heap.push(QueueItem {
            cost: 0.0,
            vertex: self.u_start,
        });
        while let Some(QueueItem { vertex, .. }) = heap.pop() {
            if settled[vertex] {
                continue;
            }
            settled[vertex] = true;
            let current = labels[vertex].clone().expect("queued vertices are labeled");
            for &e in &self.adjacency[vertex] {
                let edge = &self.edges[e];
                if settled[edge.to] {
                    continue;
                }
                let mut charged = current.charged.clone();
                let mut step = 0.0;
                if let Some(cond) = &edge.condition {
                    if edge.weight > 0.0 && !charged[cond.feature] {
                        step = edge.weight;
                    }
                    if !cond.satisfied_by(self.anchor[cond.feature]) {
                        charged[cond.feature] = true;
                    }
                }
                let cost = current.cost + step;
                if labels[edge.to].as_ref().is_none_or(|l| cost < l.cost) {
                    labels[edge.to] = Some(Label {
                        cost,
                        predecessor: Some(vertex),
                        charged,
                    });
                    heap.push(QueueItem {
                        cost,
                        vertex: edge.to,
                    });
                }
            }
        }
        let mut paths: Vec<ContrastPath> = (0..n)
            .filter(|&v| v != self.u_start && self.tags[v] == VertexTag::ContrastLeaf)
            .filter_map(|v| {
                let label = labels[v].as_ref()?;
                let mut vertices = vec![v];
                let mut cur = v;
                while let Some(p) = labels[cur].as_ref().and_then(|l| l.predecessor) {
                    vertices.push(p);
                    cur = p;
                }
                vertices.reverse();
                self.path_to(v, label.cost, vertices)
            })
            .collect();
        rank_paths(&mut paths);
        paths
    }

    /// Rules and regions for reaching `target`; `None` when a merged region
    /// admits no value the mutability constraints allow.
    fn path_to(&self, target: usize, cost: f64, vertices: Vec<usize>) -> Option<ContrastPath> {
        let conditions = root_conditions(&self.tree, target);
        let mut changed: Vec<usize> = conditions
            .iter()
            .filter(|c| !c.satisfied_by(self.anchor[c.feature]))
            .map(|c| c.feature)
            .collect();
        changed.sort_unstable();
        changed.dedup();
        let mut rules = Vec::new();
        let mut regions = Vec::new();
        for &feature in &changed {
            let on_feature: Vec<&Condition> =
                conditions.iter().filter(|c| c.feature == feature).collect();
            let spec = &self.schema[feature];
            let region = merge_region(spec, &on_feature);
            if !region_reachable(spec, &region, self.anchor[feature]) {
                return None;
            }
            rules.extend(region_rules(spec, feature, &region, self.anchor[feature]));
            regions.push(FeatureRegion { feature, region });
        }
        Some(ContrastPath {
            target,
            cost,
            rules,
            regions,
            vertices,
        })
    }
}

/// Branch conditions from the root down to `node`.
pub fn root_conditions(tree: &SurrogateTree, node: usize) -> Vec<Condition> {
    let path = tree.path_from_root(node);
    path.windows(2)
        .map(|w| {
            let NodeKind::Internal {
                feature,
                test,
                left,
                ..
            } = &tree.node(w[0]).kind
            else {
                unreachable!("parents are internal")
            };
            Condition {
                feature: *feature,
                test: test.clone(),
                holds: *left == w[1],
            }
        })
        .collect()
}

pub fn merge_region(spec: &FeatureSchema, conditions: &[&Condition]) -> Region {
    match spec.categories() {
        None => {
            let mut lower: Option<f64> = None;
            let mut upper: Option<f64> = None;
            for c in conditions {
                if let SplitTest::Threshold { value } = c.test {
                    if c.holds {
                        upper = Some(upper.map_or(value, |u| u.min(value)));
                    } else {
                        lower = Some(lower.map_or(value, |l| l.max(value)));
                    }
                }
            }
            Region::Interval { lower, upper }
        }
        Some(categories) => Region::Categories {
            allowed: (0..categories.len())
                .filter(|&k| conditions.iter().all(|c| c.satisfied_by(k as f64)))
                .collect(),
        },
    }
}

fn region_reachable(spec: &FeatureSchema, region: &Region, from: f64) -> bool {
    match region {
        Region::Interval { lower, upper } => {
            if let (Some(l), Some(u)) = (lower, upper) {
                if u <= l {
                    return false;
                }
            }
            match spec.mutability {
                Mutability::Mutable => true,
                Mutability::Immutable => region.contains(from),
                Mutability::SemiImmutable { direction } => match direction {
                    Direction::IncreaseOnly => upper.is_none_or(|u| u >= from),
                    Direction::DecreaseOnly => lower.is_none_or(|l| l < from),
                },
            }
        }
        Region::Categories { allowed } => allowed
            .iter()
            .any(|&c| spec.mutability.allows(from, c as f64)),
    }
}

fn region_rules(spec: &FeatureSchema, feature: usize, region: &Region, from: f64) -> Vec<Rule> {
    let rule = |operator, value: f64| Rule {
        feature,
        feature_name: spec.name.clone(),
        operator,
        value,
        display: spec.display_value(value),
    };
    match region {
        Region::Interval { lower, upper } => {
            let mut rules = Vec::new();
            if let Some(l) = lower.filter(|&l| from <= l) {
                rules.push(rule(Operator::Gt, l));
            }
            if let Some(u) = upper.filter(|&u| from > u) {
                rules.push(rule(Operator::Le, u));
            }
            rules
        }
        Region::Categories { allowed } => {
            if allowed.len() == 1 {
                vec![rule(Operator::Eq, allowed[0] as f64)]
            } else {
                let n = spec.categories().map_or(0, <[String]>::len);
                (0..n)
                    .filter(|k| !allowed.contains(k))
                    .map(|k| rule(Operator::Ne, k as f64))
                    .collect()
            }
        }
    }
}

/// Sorts by cost, then rule count, then target leaf id.
pub fn rank_paths(paths: &mut [ContrastPath]) {
    paths.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.rules.len().cmp(&b.rules.len()))
            .then(a.target.cmp(&b.target))
    });
}

pub fn shortest_paths(graph: &ContrastGraph) -> Vec<ContrastPath> {
    graph.shortest_paths()
}

pub const PATHS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsDocument {
    pub schema_version: u32,
    pub start_leaf: usize,
    pub paths: Vec<ContrastPath>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::TreeConfig;

    fn age_tree(label_right: usize) -> (SurrogateTree, Vec<FeatureSchema>) {
        let schema =
            vec![
                FeatureSchema::numeric("age").with_mutability(Mutability::SemiImmutable {
                    direction: Direction::IncreaseOnly,
                }),
            ];
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                vec![if i < 10 {
                    20.0 + i as f64
                } else {
                    21.0 + i as f64
                }]
            })
            .collect();
        let labels: Vec<usize> = (0..20)
            .map(|i| if i < 10 { 1 - label_right } else { label_right })
            .collect();
        let tree = SurrogateTree::fit(&rows, &labels, 2, &schema, &TreeConfig::default()).unwrap();
        (tree, schema)
    }

    #[test]
    fn increase_only_edge_is_reachable() {
        let (tree, schema) = age_tree(1);
        let graph = build_graph(&tree, &[25.0], &schema, 0, 1).unwrap();
        assert_eq!(graph.u_start, tree.leaf_of(&[25.0]));
        let paths = graph.shortest_paths();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].cost, 1.0);
        assert_eq!(paths[0].rules.len(), 1);
        assert_eq!(paths[0].rules[0].operator, Operator::Gt);
        assert_eq!(paths[0].rules[0].value, 30.0);
        assert!(graph.edges.len() <= 2 * (graph.vertex_count() - 1));
    }

    #[test]
    fn decrease_against_direction_is_unreachable() {
        let (tree, schema) = age_tree(0);
        let graph = build_graph(&tree, &[45.0], &schema, 1, 0).unwrap();
        assert!(graph.edges.len() < 2 * (graph.vertex_count() - 1));
        assert!(graph.shortest_paths().is_empty());
    }

    #[test]
    fn cheaper_feature_wins() {
        // job and city each split off a contrast leaf; job costs twice as much
        let schema = vec![
            FeatureSchema::categorical("job", ["clerk", "manager"]).with_edit_cost(2.0),
            FeatureSchema::categorical("city", ["a", "b"]).with_edit_cost(1.0),
        ];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..10 {
            rows.push(vec![0.0, 0.0]);
            labels.push(0);
            rows.push(vec![1.0, 0.0]);
            labels.push(1);
            rows.push(vec![0.0, 1.0]);
            labels.push(1);
        }
        let tree = SurrogateTree::fit(&rows, &labels, 2, &schema, &TreeConfig::default()).unwrap();
        let graph = build_graph(&tree, &[0.0, 0.0], &schema, 0, 1).unwrap();
        let paths = graph.shortest_paths();
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].cost, 1.0);
        assert_eq!(paths[0].rules[0].feature_name, "city");
        assert_eq!(paths[1].cost, 2.0);
        assert_eq!(paths[1].rules[0].feature_name, "job");
        assert_eq!(paths[1].rules[0].operator, Operator::Eq);
    }

    #[test]
    fn repeated_feature_is_merged_and_charged_once() {
        let schema = [FeatureSchema::numeric("income")];
        let conditions = [
            Condition {
                feature: 0,
                test: SplitTest::Threshold { value: 40.0 },
                holds: false,
            },
            Condition {
                feature: 0,
                test: SplitTest::Threshold { value: 60.0 },
                holds: false,
            },
        ];
        let refs: Vec<&Condition> = conditions.iter().collect();
        let region = merge_region(&schema[0], &refs);
        assert_eq!(
            region,
            Region::Interval {
                lower: Some(60.0),
                upper: None
            }
        );
        let rules = region_rules(&schema[0], 0, &region, 10.0);
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].to_string(), "income > 60");
    }

    #[test]
    fn disagreement_is_flagged() {
        let (tree, _) = age_tree(1);
        let (leaf, agrees) = locate_fact_leaf(&tree, &[25.0], 1);
        assert_eq!(leaf, tree.leaf_of(&[25.0]));
        assert!(!agrees);
    }
}
