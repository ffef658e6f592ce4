//! Class-balanced latent neighborhoods around an anchor instance.

use serde::{Deserialize, Serialize};

use crate::blackbox::{self, BlackBox};
use crate::dataset::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::latent::{euclidean, LatentPoint, VaeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub pool_index: usize,
    pub values: Vec<f64>,
    /// Label assigned by the black box.
    pub label: usize,
    /// Latent distance to the anchor.
    pub distance: f64,
}

/// How many members a class lacked relative to `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Shortfall {
    pub fact: usize,
    pub contrast: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub anchor: Instance,
    /// Sorted by ascending distance, ties by pool index.
    pub members: Vec<Neighbor>,
    pub k: usize,
    pub fact_label: usize,
    pub contrast_label: usize,
    pub shortfall: Shortfall,
}

impl NeighborSet {
    pub fn count_label(&self, label: usize) -> usize {
        self.members.iter().filter(|m| m.label == label).count()
    }

    pub fn has_shortfall(&self) -> bool {
        self.shortfall != Shortfall::default()
    }
}

/// A pool whose latent encodings and black-box labels are computed once.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    rows: Vec<Vec<f64>>,
    latent: Vec<LatentPoint>,
    labels: Vec<usize>,
}

impl NeighborIndex {
    pub fn build(pool: &Dataset, model: &dyn BlackBox, vae: &VaeModel) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidArgument("neighbor pool is empty".into()));
        }
        let rows = pool.rows().to_vec();
        let latent = vae.encode_batch(&rows)?;
        let labels = blackbox::predict_labels(model, &rows)?;
        Ok(NeighborIndex {
            rows,
            latent,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Black-box labels of the pool rows.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn latent(&self) -> &[LatentPoint] {
        &self.latent
    }

    /// The `k` pool points nearest to `z`, as (pool index, distance), ties by index.
    pub fn nearest(&self, z: &LatentPoint, k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = self
            .latent
            .iter()
            .enumerate()
            .map(|(i, p)| (i, euclidean(&p.z, &z.z)))
            .collect();
        sort_by_distance(&mut scored);
        scored.truncate(k);
        scored
    }

    /// Nearest `k / 2` pool points labeled `fact_label` and `k / 2` labeled
    /// `contrast_label`; pool rows identical to the anchor are skipped.
    pub fn sample(
        &self,
        x: &Instance,
        vae: &VaeModel,
        k: usize,
        fact_label: usize,
        contrast_label: usize,
    ) -> Result<NeighborSet> {
        if k < 2 || !k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "k must be even and >= 2, got {k}"
            )));
        }
        let z = vae.encode(x)?;
        let half = k / 2;
        let mut fact = Vec::new();
        let mut contrast = Vec::new();
        for (i, (p, &label)) in self.latent.iter().zip(&self.labels).enumerate() {
            if self.rows[i] == x.values {
                continue;
            }
            if label == fact_label {
                fact.push((i, euclidean(&p.z, &z.z)));
            } else if label == contrast_label {
                contrast.push((i, euclidean(&p.z, &z.z)));
            }
        }
        if contrast.is_empty() {
            return Err(Error::NoContrastClass(contrast_label));
        }
        let shortfall = Shortfall {
            fact: half.saturating_sub(fact.len()),
            contrast: half.saturating_sub(contrast.len()),
        };
        let mut chosen = Vec::with_capacity(k);
        for mut class in [fact, contrast] {
            sort_by_distance(&mut class);
            class.truncate(half);
            chosen.extend(class);
        }
        sort_by_distance(&mut chosen);
        let members = chosen
            .into_iter()
            .map(|(i, distance)| Neighbor {
                pool_index: i,
                values: self.rows[i].clone(),
                label: self.labels[i],
                distance,
            })
            .collect();
        Ok(NeighborSet {
            anchor: x.clone(),
            members,
            k,
            fact_label,
            contrast_label,
            shortfall,
        })
    }
}

fn sort_by_distance(v: &mut [(usize, f64)]) {
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

/// Picks the contrast class: the explicit choice if given, otherwise the other
/// class of a binary model.
pub fn resolve_contrast(class_count: usize, fact: usize, explicit: Option<usize>) -> Result<usize> {
    match explicit {
        Some(c) if c >= class_count => Err(Error::InvalidArgument(format!(
            "contrast class {c} out of range for {class_count} classes"
        ))),
        Some(c) if c == fact => Err(Error::InvalidArgument(format!(
            "contrast class {c} equals the predicted class"
        ))),
        Some(c) => Ok(c),
        None if class_count == 2 => Ok(1 - fact),
        None => Err(Error::InvalidArgument(
            "multi-class models require an explicit contrast class".into(),
        )),
    }
}

/// Labels `x` with the black box and samples its balanced neighborhood from `pool`.
pub fn sample_neighbors(
    x: &Instance,
    pool: &Dataset,
    model: &dyn BlackBox,
    vae: &VaeModel,
    k: usize,
    contrast: Option<usize>,
) -> Result<NeighborSet> {
    let (fact, _) = blackbox::predict(model, x)?;
    let contrast = resolve_contrast(model.class_count(), fact, contrast)?;
    NeighborIndex::build(pool, model, vae)?.sample(x, vae, k, fact, contrast)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{train_logistic, LogisticConfig};
    use crate::dataset::FeatureSchema;
    use crate::latent::{train_vae, VaeConfig};

    fn fixture() -> (Dataset, crate::blackbox::LogisticModel, VaeModel) {
        let schema = (0..4)
            .map(|i| FeatureSchema::numeric(format!("f{i}")))
            .collect();
        let rows = vec![
            vec![-2.0, -1.0, 0.0, 1.0],
            vec![-1.5, -1.2, 0.1, 0.9],
            vec![2.0, 1.0, 0.0, -1.0],
            vec![1.7, 1.1, -0.1, -0.8],
        ];
        let ds = Dataset::new(schema, rows, Some(vec![0, 0, 1, 1])).unwrap();
        let (lr, _) = train_logistic(&ds, &LogisticConfig::default()).unwrap();
        let (vae, _) = train_vae(&ds, &VaeConfig::for_width(4)).unwrap();
        (ds, lr, vae)
    }

    #[test]
    fn exhaustive_pool_is_balanced() {
        let (ds, lr, vae) = fixture();
        let anchor = Instance::new(vec![-1.8, -1.0, 0.0, 1.0]);
        let set = sample_neighbors(&anchor, &ds, &lr, &vae, 4, None).unwrap();
        assert_eq!(set.members.len(), 4);
        assert_eq!(set.count_label(0), 2);
        assert_eq!(set.count_label(1), 2);
        assert!(!set.has_shortfall());
        assert!(set
            .members
            .windows(2)
            .all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn anchor_is_excluded_and_shortfall_recorded() {
        let (ds, lr, vae) = fixture();
        let anchor = ds.instance(0);
        let set = sample_neighbors(&anchor, &ds, &lr, &vae, 4, None).unwrap();
        assert_eq!(set.members.len(), 3);
        assert!(set.members.iter().all(|m| m.pool_index != 0));
        assert_eq!(
            set.shortfall,
            Shortfall {
                fact: 1,
                contrast: 0
            }
        );
    }

    #[test]
    fn fact_only_pool_is_an_error() {
        let (ds, lr, vae) = fixture();
        let pool = ds.select(&[0, 1]).unwrap();
        let anchor = Instance::new(vec![-1.8, -1.0, 0.0, 1.0]);
        assert!(matches!(
            sample_neighbors(&anchor, &pool, &lr, &vae, 4, None),
            Err(Error::NoContrastClass(1))
        ));
    }

    #[test]
    fn odd_k_rejected() {
        let (ds, lr, vae) = fixture();
        assert!(sample_neighbors(&ds.instance(0), &ds, &lr, &vae, 3, None).is_err());
    }

    #[test]
    fn contrast_resolution() {
        assert_eq!(resolve_contrast(2, 0, None).unwrap(), 1);
        assert_eq!(resolve_contrast(2, 1, None).unwrap(), 0);
        assert!(resolve_contrast(3, 1, None).is_err());
        assert_eq!(resolve_contrast(3, 1, Some(2)).unwrap(), 2);
        assert!(resolve_contrast(3, 1, Some(1)).is_err());
    }
}
