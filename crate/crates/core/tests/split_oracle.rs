mod common;

use common::splits::{check_choice, check_tree, random_case};
use treecf::surrogate::{best_split, SurrogateTree};

#[test]
fn direct_best_split_matches_exhaustive_search() {
    let mut ties = 0;
    for seed in 0..100 {
        let case = random_case(seed);
        let idx: Vec<usize> = (0..case.rows.len()).collect();
        let candidates: Vec<usize> = (0..case.schema.len())
            .filter(|&j| !case.schema[j].is_immutable())
            .collect();
        let split = best_split(
            &case.rows,
            &case.labels,
            &idx,
            &case.schema,
            &candidates,
            case.classes,
            case.config.min_samples_leaf,
        );
        let chosen = split.as_ref().map(|s| (s.feature, &s.test, Some(s.gain)));
        let tie = check_choice(
            &case.rows,
            &case.labels,
            &idx,
            &case.schema,
            case.classes,
            case.config.min_samples_leaf,
            chosen,
        )
        .unwrap_or_else(|e| panic!("case {seed}: {e}"));
        ties += usize::from(tie);
    }
    assert!(ties > 50, "the tie rule was checked on only {ties} cases");
}

#[test]
fn every_node_of_fitted_trees_is_optimal() {
    let mut nodes = 0;
    for seed in 0..100 {
        let case = random_case(seed);
        let tree = SurrogateTree::fit(
            &case.rows,
            &case.labels,
            case.classes,
            &case.schema,
            &case.config,
        )
        .unwrap();
        let report = check_tree(&case, &tree).unwrap_or_else(|e| panic!("case {seed}: {e}"));
        nodes += report.nodes;
        assert!(tree.depth() <= case.config.max_depth);
        assert!(tree.len() < 1 << (case.config.max_depth + 1));
    }
    assert!(nodes > 300, "only {nodes} nodes checked");
}

#[test]
fn tied_gains_go_to_the_lower_feature_then_smaller_threshold() {
    use treecf::dataset::FeatureSchema;
    use treecf::surrogate::SplitTest;
    // both features separate the classes perfectly at two places each
    let rows = vec![
        vec![0.0, 0.0],
        vec![1.0, 1.0],
        vec![2.0, 2.0],
        vec![3.0, 3.0],
    ];
    let labels = vec![0, 1, 1, 0];
    let schema = vec![FeatureSchema::numeric("a"), FeatureSchema::numeric("b")];
    let split = best_split(&rows, &labels, &[0, 1, 2, 3], &schema, &[0, 1], 2, 1).unwrap();
    assert_eq!(split.feature, 0);
    assert_eq!(split.test, SplitTest::Threshold { value: 0.5 });
}
