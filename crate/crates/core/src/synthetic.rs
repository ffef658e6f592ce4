//! Built-in synthetic tabular datasets with mixed actionability annotations.
//!
//! Both generators share one schema: an immutable categorical `group`, an
//! increase-only `age`, a decrease-only `debt` and two mutable features `x1`
//! and `x2`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, Direction, FeatureSchema, LabelColumn, Mutability};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two Gaussian clusters separated mainly along `x1`.
    Blobs,
    /// Two interleaved half circles in (`x1`, `x2`).
    Moons,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "moons" => Ok(SyntheticKind::Moons),
            other => Err(Error::InvalidArgument(format!(
                "unknown synthetic dataset '{other}' (expected blobs or moons)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Moons => "moons",
        })
    }
}

pub fn synthetic_schema() -> Vec<FeatureSchema> {
    vec![
        FeatureSchema::categorical("group", ["a", "b", "c"]).with_mutability(Mutability::Immutable),
        FeatureSchema::numeric("age").with_mutability(Mutability::SemiImmutable {
            direction: Direction::IncreaseOnly,
        }),
        FeatureSchema::numeric("debt").with_mutability(Mutability::SemiImmutable {
            direction: Direction::DecreaseOnly,
        }),
        FeatureSchema::numeric("x1"),
        FeatureSchema::numeric("x2"),
    ]
}

/// `n` rows with labels balanced to within one, deterministic in `seed`.
pub fn generate(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(
            "synthetic datasets need at least 2 rows".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let s = if y == 1 { 1.0 } else { -1.0 };
        let group = rng.random_range(0..3) as f64;
        let row = match kind {
            SyntheticKind::Blobs => {
                let age = 40.0 + 3.0 * s + 8.0 * unit.sample(&mut rng);
                let debt = 5.0 - 0.5 * s + 1.5 * unit.sample(&mut rng);
                let x1 = 2.0 * s + unit.sample(&mut rng);
                let x2 = 0.5 * s + unit.sample(&mut rng);
                vec![group, age, debt, x1, x2]
            }
            SyntheticKind::Moons => {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let (cx, cy) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let x1 = cx + 0.15 * unit.sample(&mut rng);
                let x2 = cy + 0.15 * unit.sample(&mut rng);
                let age = 40.0 + 10.0 * unit.sample(&mut rng);
                let debt = 5.0 + 2.0 * unit.sample(&mut rng);
                vec![group, age, debt, x1, x2]
            }
        };
        rows.push(row);
        labels.push(y);
    }
    Ok(
        Dataset::new(synthetic_schema(), rows, Some(labels))?.with_label_column(LabelColumn {
            name: "label".into(),
            categories: None,
        }),
    )
}
