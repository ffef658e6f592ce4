//! Exhaustive information-gain search over every admissible split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treecf::dataset::{FeatureSchema, Mutability};
use treecf::surrogate::{NodeKind, SplitTest, SurrogateTree, TreeConfig};

use super::entropy_bits;

/// Gains closer than this are treated as one value when predicting ties.
pub const GAIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Candidate {
    pub feature: usize,
    /// Threshold, or the category that goes left.
    pub value: f64,
    pub categorical: bool,
    pub gain: f64,
}

fn goes_left(candidate_categorical: bool, value: f64, v: f64) -> bool {
    if candidate_categorical {
        v == value
    } else {
        v <= value
    }
}

pub fn gain_of(
    rows: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
    classes: usize,
    feature: usize,
    categorical: bool,
    value: f64,
) -> (f64, usize, usize) {
    let mut parent = vec![0; classes];
    let mut left = vec![0; classes];
    let mut right = vec![0; classes];
    for &i in idx {
        parent[labels[i]] += 1;
        if goes_left(categorical, value, rows[i][feature]) {
            left[labels[i]] += 1;
        } else {
            right[labels[i]] += 1;
        }
    }
    let n = idx.len() as f64;
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    let gain = entropy_bits(&parent)
        - nl as f64 / n * entropy_bits(&left)
        - nr as f64 / n * entropy_bits(&right);
    (gain, nl, nr)
}

/// Every admissible split in enumeration order: features ascending, then
/// thresholds or categories ascending.
pub fn enumerate(
    rows: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
    schema: &[FeatureSchema],
    classes: usize,
    min_leaf: usize,
) -> Vec<Candidate> {
    let min_leaf = min_leaf.max(1);
    let mut out = Vec::new();
    for (feature, spec) in schema.iter().enumerate() {
        if spec.is_immutable() {
            continue;
        }
        let values: Vec<f64> = match spec.categories() {
            Some(c) => (0..c.len()).map(|k| k as f64).collect(),
            None => {
                let mut v: Vec<f64> = idx.iter().map(|&i| rows[i][feature]).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
            }
        };
        let categorical = spec.categories().is_some();
        for value in values {
            let (gain, nl, nr) = gain_of(rows, labels, idx, classes, feature, categorical, value);
            if nl >= min_leaf && nr >= min_leaf {
                out.push(Candidate {
                    feature,
                    value,
                    categorical,
                    gain,
                });
            }
        }
    }
    out
}

pub fn best_gain(candidates: &[Candidate]) -> f64 {
    candidates.iter().map(|c| c.gain).fold(0.0, f64::max)
}

/// The split the tie rule must pick, or `None` if the best gain is not
/// positive or a near-tie makes the expected pick ambiguous.
pub fn expected_pick(candidates: &[Candidate]) -> Option<&Candidate> {
    let best = best_gain(candidates);
    if best <= GAIN_EPS {
        return None;
    }
    // gains in (best - 1e-9, best - 1e-12) would make the sequential rule
    // depend on rounding; skip the identity check there
    if candidates
        .iter()
        .any(|c| c.gain < best - 1e-12 && c.gain > best - GAIN_EPS)
    {
        return None;
    }
    candidates.iter().find(|c| c.gain >= best - 1e-12)
}

fn test_value(test: &SplitTest) -> (bool, f64) {
    match test {
        SplitTest::Threshold { value } => (false, *value),
        SplitTest::Membership { categories } => {
            assert_eq!(categories.len(), 1, "one-vs-rest membership");
            (true, categories[0] as f64)
        }
    }
}

/// Outcome of checking one fitted or direct split against the oracle.
#[derive(Debug, Default, Clone, Copy)]
pub struct SplitCheck {
    pub nodes: usize,
    pub ties_checked: usize,
}

/// Checks a chosen split (or its absence) on the rows `idx`.
pub fn check_choice(
    rows: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
    schema: &[FeatureSchema],
    classes: usize,
    min_leaf: usize,
    chosen: Option<(usize, &SplitTest, Option<f64>)>,
) -> Result<bool, String> {
    let candidates = enumerate(rows, labels, idx, schema, classes, min_leaf);
    let best = best_gain(&candidates);
    match chosen {
        None => {
            if best > GAIN_EPS {
                return Err(format!("no split chosen but gain {best} is available"));
            }
            Ok(false)
        }
        Some((feature, test, reported)) => {
            let (categorical, value) = test_value(test);
            if schema[feature].is_immutable() {
                return Err(format!("split on immutable feature {feature}"));
            }
            let (gain, nl, nr) = gain_of(rows, labels, idx, classes, feature, categorical, value);
            if nl < min_leaf.max(1) || nr < min_leaf.max(1) {
                return Err(format!("split leaves {nl}/{nr} rows, min leaf {min_leaf}"));
            }
            if gain <= 1e-12 {
                return Err(format!("chosen split has gain {gain}"));
            }
            if gain < best - GAIN_EPS {
                return Err(format!("chosen gain {gain} below exhaustive best {best}"));
            }
            if let Some(r) = reported {
                if (r - gain).abs() > GAIN_EPS {
                    return Err(format!("reported gain {r} but oracle computes {gain}"));
                }
            }
            match expected_pick(&candidates) {
                Some(e) => {
                    if e.feature != feature
                        || e.categorical != categorical
                        || (e.value - value).abs() > 1e-12
                    {
                        return Err(format!(
                            "tie rule expects feature {} at {} but got feature {feature} at {value}",
                            e.feature, e.value
                        ));
                    }
                    Ok(true)
                }
                None => Ok(false),
            }
        }
    }
}

pub struct SplitCase {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub schema: Vec<FeatureSchema>,
    pub classes: usize,
    pub config: TreeConfig,
}

/// Random neighborhood of at most 200 points with coarse values, so ties in
/// both values and gains are common.
pub fn random_case(seed: u64) -> SplitCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(10..=200);
    let classes = rng.random_range(2..=3);
    let mut schema = vec![
        FeatureSchema::numeric("a"),
        FeatureSchema::categorical("b", ["p", "q", "r"]),
        FeatureSchema::numeric("c"),
        FeatureSchema::numeric("d"),
        FeatureSchema::categorical("e", ["s", "t"]),
    ];
    // an immutable feature must never be split on
    let locked = rng.random_range(0..schema.len());
    if rng.random_bool(0.5) {
        schema[locked].mutability = Mutability::Immutable;
    }
    let grid = [4.0, 10.0, 40.0];
    let resolution = grid[rng.random_range(0..grid.len())];
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = schema
            .iter()
            .map(|f| match f.categories() {
                Some(c) => rng.random_range(0..c.len()) as f64,
                None => (rng.random::<f64>() * resolution).round() / resolution * 10.0 - 5.0,
            })
            .collect();
        // labels depend on the data with some noise so trees have structure
        let signal = row[0] + if row[1] == 1.0 { 2.0 } else { 0.0 } - row[2] * 0.5;
        let label = if rng.random_bool(0.2) {
            rng.random_range(0..classes)
        } else {
            ((signal + 5.0).max(0.0) as usize * classes / 12).min(classes - 1)
        };
        rows.push(row);
        labels.push(label);
    }
    if labels.iter().all(|&l| l == labels[0]) {
        labels[0] = (labels[0] + 1) % classes;
    }
    SplitCase {
        rows,
        labels,
        schema,
        classes,
        config: TreeConfig {
            max_depth: rng.random_range(1..=6),
            min_samples_leaf: rng.random_range(1..=5),
        },
    }
}

/// Rows reaching every node, by replaying the tree's tests from the root.
pub fn node_rows(tree: &SurrogateTree, rows: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); tree.len()];
    out[0] = (0..rows.len()).collect();
    let mut stack = vec![0];
    while let Some(id) = stack.pop() {
        if let NodeKind::Internal {
            feature,
            test,
            left,
            right,
        } = &tree.node(id).kind
        {
            let (categorical, value) = test_value(test);
            let (l, r): (Vec<usize>, Vec<usize>) = out[id]
                .iter()
                .partition(|&&i| goes_left(categorical, value, rows[i][*feature]));
            out[*left] = l;
            out[*right] = r;
            stack.push(*left);
            stack.push(*right);
        }
    }
    out
}

/// Checks every node of a tree fitted on `case`: internal nodes hold an
/// optimal split, and leaves that were allowed to split had none available.
pub fn check_tree(case: &SplitCase, tree: &SurrogateTree) -> Result<SplitCheck, String> {
    let reaching = node_rows(tree, &case.rows);
    let mut report = SplitCheck::default();
    let min_leaf = case.config.min_samples_leaf.max(1);
    for (id, node) in tree.nodes().iter().enumerate() {
        let idx = &reaching[id];
        let mut counts = vec![0; case.classes];
        idx.iter().for_each(|&i| counts[case.labels[i]] += 1);
        if counts != node.counts {
            return Err(format!(
                "node {id} counts {:?} but replay gives {counts:?}",
                node.counts
            ));
        }
        let chosen = match &node.kind {
            NodeKind::Internal { feature, test, .. } => Some((*feature, test, None)),
            NodeKind::Leaf => {
                let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
                if pure || node.depth >= case.config.max_depth || idx.len() < 2 * min_leaf {
                    continue;
                }
                None
            }
        };
        report.nodes += 1;
        let tie = check_choice(
            &case.rows,
            &case.labels,
            idx,
            &case.schema,
            case.classes,
            case.config.min_samples_leaf,
            chosen,
        )
        .map_err(|e| format!("node {id}: {e}"))?;
        report.ties_checked += usize::from(tie);
    }
    Ok(report)
}
