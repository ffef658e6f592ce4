//! Independent reference implementations used by the integration tests and
//! the acceptance suite. Nothing here calls the routine it is checking.
#![allow(dead_code)]

pub mod gradients;
pub mod metrics;
pub mod paths;
pub mod splits;

use std::sync::OnceLock;

use treecf::experiment::{ModelKind, Setup};
use treecf::synthetic::SyntheticKind;

/// Lowest index among the maxima.
pub fn first_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn entropy_bits(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Shared blobs/logistic setup; training it once keeps the suite fast.
pub fn blobs_logistic() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        Setup::synthetic(SyntheticKind::Blobs, ModelKind::Logistic, 1).expect("blobs setup")
    })
}

pub fn moons_mlp() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        Setup::synthetic(SyntheticKind::Moons, ModelKind::Mlp, 1).expect("moons setup")
    })
}

pub fn digits() -> treecf::dataset::Dataset {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    treecf::dataset::load_dataset(dir.join("digits.csv"), dir.join("digits_schema.json"))
        .expect("digits fixture")
}

/// One numeric feature that can only decrease, with the contrast class on
/// its high side: no allowed edit reaches it.
pub fn one_way_setup() -> Setup {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    use treecf::dataset::{Direction, FeatureSchema, Mutability};
    let schema = vec![
        FeatureSchema::numeric("level").with_mutability(Mutability::SemiImmutable {
            direction: Direction::DecreaseOnly,
        }),
        FeatureSchema::numeric("noise").with_mutability(Mutability::Immutable),
    ];
    let rows: Vec<Vec<f64>> = (0..800)
        .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)])
        .collect();
    let labels = rows.iter().map(|r| usize::from(r[0] > 0.0)).collect();
    let data = treecf::dataset::Dataset::new(schema, rows, Some(labels)).unwrap();
    Setup::from_dataset(&data, ModelKind::Logistic, None, 3).unwrap()
}
