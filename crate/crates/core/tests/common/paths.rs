//! Brute-force enumeration of leaf-to-leaf tree walks.
//!
//! In a tree the walk between two leaves is unique: up to the lowest common
//! ancestor, then down. Its cost is the edit cost of every distinct feature
//! whose downward condition the anchor violates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treecf::dataset::{Direction, FeatureSchema, Mutability};
use treecf::graph::ContrastPath;
use treecf::surrogate::{NodeKind, SplitTest, SurrogateTree, TreeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePath {
    pub target: usize,
    pub cost: f64,
    pub rule_count: usize,
    pub vertices: Vec<usize>,
}

/// (feature, test, left branch) for the step from a parent to `child`.
fn step(tree: &SurrogateTree, child: usize) -> (usize, SplitTest, bool) {
    let parent = tree.node(child).parent.expect("non-root");
    match &tree.node(parent).kind {
        NodeKind::Internal {
            feature,
            test,
            left,
            ..
        } => (*feature, test.clone(), *left == child),
        NodeKind::Leaf => unreachable!(),
    }
}

fn passes(test: &SplitTest, left: bool, v: f64) -> bool {
    let goes_left = match test {
        SplitTest::Threshold { value } => v <= *value,
        SplitTest::Membership { categories } => categories.iter().any(|&c| c as f64 == v),
    };
    goes_left == left
}

/// Leaf reached by following the tests from the root.
pub fn route(tree: &SurrogateTree, x: &[f64]) -> usize {
    let mut id = 0;
    while let NodeKind::Internal {
        feature,
        test,
        left,
        right,
    } = &tree.node(id).kind
    {
        id = if passes(test, true, x[*feature]) {
            *left
        } else {
            *right
        };
    }
    id
}

fn ancestors(tree: &SurrogateTree, mut id: usize) -> Vec<usize> {
    let mut out = vec![id];
    while let Some(p) = tree.node(id).parent {
        out.push(p);
        id = p;
    }
    out
}

/// Values worth trying for `feature` when looking for one that meets
/// `conditions`: every boundary, the float just above it, and the anchor.
fn probes(spec: &FeatureSchema, conditions: &[(SplitTest, bool)], anchor: f64) -> Vec<f64> {
    match spec.categories() {
        Some(c) => (0..c.len()).map(|k| k as f64).collect(),
        None => {
            let mut out = vec![anchor];
            for (test, _) in conditions {
                if let SplitTest::Threshold { value } = test {
                    out.push(*value);
                    out.push(value.next_up());
                }
            }
            out
        }
    }
}

fn feasible(spec: &FeatureSchema, conditions: &[(SplitTest, bool)], anchor: f64) -> bool {
    probes(spec, conditions, anchor).into_iter().any(|v| {
        conditions.iter().all(|(t, l)| passes(t, *l, v)) && spec.mutability.allows(anchor, v)
    })
}

/// Every contrast leaf reachable from the anchor's leaf, ranked by cost,
/// rule count and leaf id.
pub fn enumerate(
    tree: &SurrogateTree,
    x: &[f64],
    schema: &[FeatureSchema],
    contrast: usize,
) -> Vec<OraclePath> {
    let start = route(tree, x);
    let start_up = ancestors(tree, start);
    let mut out = Vec::new();
    for target in 0..tree.len() {
        let node = tree.node(target);
        if target == start || !node.is_leaf() || node.label != contrast {
            continue;
        }
        let target_up = ancestors(tree, target);
        let lca = *target_up
            .iter()
            .find(|a| start_up.contains(a))
            .expect("shared root");
        let mut down: Vec<usize> = target_up
            .iter()
            .take_while(|&&a| a != lca)
            .copied()
            .collect();
        down.reverse();

        let mut charged: Vec<usize> = Vec::new();
        let mut cost = 0.0;
        let mut blocked = false;
        for &child in &down {
            let (feature, test, left) = step(tree, child);
            if passes(&test, left, x[feature]) {
                continue;
            }
            if !feasible(&schema[feature], &[(test, left)], x[feature]) {
                blocked = true;
                break;
            }
            if !charged.contains(&feature) {
                charged.push(feature);
                cost += schema[feature].edit_cost;
            }
        }
        if blocked {
            continue;
        }

        // the full set of conditions on each changed feature must be jointly reachable
        let all: Vec<(usize, SplitTest, bool)> = target_up[..target_up.len() - 1]
            .iter()
            .map(|&c| step(tree, c))
            .collect();
        let mut rule_count = 0;
        charged.sort_unstable();
        for &feature in &charged {
            let on: Vec<(SplitTest, bool)> = all
                .iter()
                .filter(|(f, _, _)| *f == feature)
                .map(|(_, t, l)| (t.clone(), *l))
                .collect();
            if !feasible(&schema[feature], &on, x[feature]) {
                blocked = true;
                break;
            }
            rule_count += rules_for(&schema[feature], &on, x[feature]);
        }
        if blocked {
            continue;
        }
        let mut vertices: Vec<usize> = start_up
            .iter()
            .take_while(|&&a| a != lca)
            .copied()
            .collect();
        vertices.push(lca);
        vertices.extend(&down);
        out.push(OraclePath {
            target,
            cost,
            rule_count,
            vertices,
        });
    }
    out.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.rule_count.cmp(&b.rule_count))
            .then(a.target.cmp(&b.target))
    });
    out
}

/// Violated bounds for a numeric feature; for a categorical one, a single
/// rule when one category remains, else one per excluded category.
fn rules_for(spec: &FeatureSchema, conditions: &[(SplitTest, bool)], anchor: f64) -> usize {
    match spec.categories() {
        Some(c) => {
            let allowed = (0..c.len())
                .filter(|&k| conditions.iter().all(|(t, l)| passes(t, *l, k as f64)))
                .count();
            if allowed == 1 {
                1
            } else {
                c.len() - allowed
            }
        }
        None => {
            let mut lower = f64::NEG_INFINITY;
            let mut upper = f64::INFINITY;
            for (t, l) in conditions {
                if let SplitTest::Threshold { value } = t {
                    if *l {
                        upper = upper.min(*value);
                    } else {
                        lower = lower.max(*value);
                    }
                }
            }
            usize::from(anchor <= lower) + usize::from(anchor > upper)
        }
    }
}

/// Compares Dijkstra output with the enumeration. Edit costs are multiples of
/// 0.25, so sums are exact and costs must match bit for bit.
pub fn compare(found: &[ContrastPath], expected: &[OraclePath]) -> Result<(), String> {
    let got: Vec<usize> = found.iter().map(|p| p.target).collect();
    let want: Vec<usize> = expected.iter().map(|p| p.target).collect();
    if got != want {
        return Err(format!("targets {got:?}, expected {want:?}"));
    }
    for (f, e) in found.iter().zip(expected) {
        if f.cost != e.cost {
            return Err(format!(
                "leaf {}: cost {} expected {}",
                e.target, f.cost, e.cost
            ));
        }
        if f.rules.len() != e.rule_count {
            return Err(format!(
                "leaf {}: {} rules expected {}",
                e.target,
                f.rules.len(),
                e.rule_count
            ));
        }
        if f.vertices != e.vertices {
            return Err(format!(
                "leaf {}: walk {:?} expected {:?}",
                e.target, f.vertices, e.vertices
            ));
        }
    }
    Ok(())
}

pub struct GraphCase {
    pub tree: SurrogateTree,
    /// Annotated schema used for the search; the tree was fitted with every
    /// feature mutable so the annotations can block edges.
    pub schema: Vec<FeatureSchema>,
    pub x: Vec<f64>,
    pub fact: usize,
    pub contrast: usize,
}

pub fn random_case(seed: u64) -> GraphCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=3);
    let base = vec![
        FeatureSchema::numeric("n0"),
        FeatureSchema::numeric("n1"),
        FeatureSchema::categorical("c2", ["a", "b", "c", "d"]),
        FeatureSchema::numeric("n3"),
        FeatureSchema::categorical("c4", ["u", "v", "w"]),
    ];
    let n = rng.random_range(40..=250);
    let draw = |rng: &mut ChaCha8Rng, f: &FeatureSchema| match f.categories() {
        Some(c) => rng.random_range(0..c.len()) as f64,
        None => (rng.random::<f64>() * 20.0).round() / 2.0,
    };
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| base.iter().map(|f| draw(&mut rng, f)).collect())
        .collect();
    let mut labels: Vec<usize> = rows
        .iter()
        .map(|r| {
            if rng.random_bool(0.3) {
                rng.random_range(0..classes)
            } else {
                ((r[0] + r[1] + r[2] * 2.0) as usize) % classes
            }
        })
        .collect();
    labels[0] = 0;
    labels[1] = 1;
    let config = TreeConfig {
        max_depth: rng.random_range(1..=6),
        min_samples_leaf: rng.random_range(1..=4),
    };
    let tree = SurrogateTree::fit(&rows, &labels, classes, &base, &config).expect("fit");

    let schema: Vec<FeatureSchema> = base
        .iter()
        .map(|f| {
            let roll = rng.random_range(0..6);
            let mutability = match roll {
                0 => Mutability::Immutable,
                // categorical features carry no direction
                1 | 2 if !f.is_numeric() => Mutability::Mutable,
                1 => Mutability::SemiImmutable {
                    direction: Direction::IncreaseOnly,
                },
                2 => Mutability::SemiImmutable {
                    direction: Direction::DecreaseOnly,
                },
                _ => Mutability::Mutable,
            };
            // quarter steps make equal-cost ties common
            let cost = rng.random_range(1..=8) as f64 * 0.25;
            f.clone().with_mutability(mutability).with_edit_cost(cost)
        })
        .collect();
    // off-grid anchor values never coincide with a threshold
    let x: Vec<f64> = base
        .iter()
        .map(|f| match f.categories() {
            Some(c) => rng.random_range(0..c.len()) as f64,
            None => rng.random::<f64>() * 10.0 + 0.013,
        })
        .collect();
    let fact = tree.node(route(&tree, &x)).label;
    let mut contrast = rng.random_range(0..classes - 1);
    if contrast >= fact {
        contrast += 1;
    }
    GraphCase {
        tree,
        schema,
        x,
        fact,
        contrast,
    }
}
