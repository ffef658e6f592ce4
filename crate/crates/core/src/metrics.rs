//! Per-counterfactual quality measures and benchmark reports.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{self, BlackBox};
use crate::dataset::{Dataset, FeatureSchema, Instance, Normalization, VALUE_TOLERANCE};
use crate::error::{Error, Result};
use crate::latent::{euclidean, VaeModel};
use crate::neighborhood::NeighborIndex;
use crate::recourse::{Explainer, RecourseConfig};

/// Neighbors consulted by the yNN score.
pub const YNN_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub l0: usize,
    pub l2: f64,
    pub vae_dist: f64,
    /// Defined only for flipping counterfactuals.
    pub redundancy: Option<usize>,
    pub ynn: f64,
    pub flipped: bool,
    /// Filled in only by timed benchmarks.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_s: Option<f64>,
    pub immutability_violations: usize,
    pub semi_immutability_violations: usize,
}

impl MetricsRecord {
    pub fn compute(
        explainer: &Explainer,
        x: &Instance,
        x_prime: &Instance,
        schema: &[FeatureSchema],
        contrast_label: usize,
    ) -> Result<MetricsRecord> {
        let model = explainer.model();
        let flipped = blackbox::predict_label(model, &x_prime.values)? == contrast_label;
        let (immutability_violations, semi_immutability_violations) =
            violations(&x.values, &x_prime.values, schema);
        Ok(MetricsRecord {
            l0: l0_cost(&x.values, &x_prime.values),
            l2: l2_cost(
                &x.values,
                &x_prime.values,
                schema,
                explainer.pool().normalization(),
            ),
            vae_dist: vae_distance(explainer.vae(), x, x_prime)?,
            redundancy: if flipped {
                Some(redundancy(
                    &x.values,
                    &x_prime.values,
                    model,
                    contrast_label,
                )?)
            } else {
                None
            },
            ynn: ynn_indexed(
                &x_prime.values,
                explainer.index(),
                explainer.vae(),
                model,
                YNN_K,
            )?,
            flipped,
            latency_s: None,
            immutability_violations,
            semi_immutability_violations,
        })
    }
}

fn differs(a: f64, b: f64) -> bool {
    (a - b).abs() > VALUE_TOLERANCE
}

/// Number of features whose values differ.
pub fn l0_cost(x: &[f64], x_prime: &[f64]) -> usize {
    x.iter()
        .zip(x_prime)
        .filter(|(a, b)| differs(**a, **b))
        .count()
}

/// Euclidean distance on standardized numerics; each differing categorical adds 1.
pub fn l2_cost(
    x: &[f64],
    x_prime: &[f64],
    schema: &[FeatureSchema],
    normalization: &[Normalization],
) -> f64 {
    schema
        .iter()
        .enumerate()
        .map(|(j, f)| {
            if f.is_numeric() {
                ((x[j] - x_prime[j]) / normalization[j].std).powi(2)
            } else if differs(x[j], x_prime[j]) {
                1.0
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .sqrt()
}

pub fn vae_distance(vae: &VaeModel, x: &Instance, x_prime: &Instance) -> Result<f64> {
    vae.latent_distance(x, x_prime)
}

/// Number of changed features whose individual reversion keeps the contrast label.
pub fn redundancy(
    x: &[f64],
    x_prime: &[f64],
    model: &dyn BlackBox,
    contrast_label: usize,
) -> Result<usize> {
    if blackbox::predict_label(model, x_prime)? != contrast_label {
        return Err(Error::InvalidArgument(
            "redundancy is defined only for counterfactuals that flip the prediction".into(),
        ));
    }
    let mut count = 0;
    for j in 0..x.len() {
        if !differs(x[j], x_prime[j]) {
            continue;
        }
        let mut reverted = x_prime.to_vec();
        reverted[j] = x[j];
        if blackbox::predict_label(model, &reverted)? == contrast_label {
            count += 1;
        }
    }
    Ok(count)
}

/// Fraction of the `k` latent-nearest pool points whose black-box label
/// matches the label of `x_prime`.
pub fn ynn(
    x_prime: &[f64],
    pool: &Dataset,
    model: &dyn BlackBox,
    vae: &VaeModel,
    k: usize,
) -> Result<f64> {
    let index = NeighborIndex::build(pool, model, vae)?;
    ynn_indexed(x_prime, &index, vae, model, k)
}

pub fn ynn_indexed(
    x_prime: &[f64],
    index: &NeighborIndex,
    vae: &VaeModel,
    model: &dyn BlackBox,
    k: usize,
) -> Result<f64> {
    if index.is_empty() || k == 0 {
        return Err(Error::InvalidArgument(
            "yNN needs a nonempty pool and k > 0".into(),
        ));
    }
    let label = blackbox::predict_label(model, x_prime)?;
    let z = vae.encode_values(x_prime)?;
    let nearest = index.nearest(&z, k);
    let agree = nearest
        .iter()
        .filter(|(i, _)| index.labels()[*i] == label)
        .count();
    Ok(agree as f64 / nearest.len() as f64)
}

/// (immutable features changed, semi-immutable features moved against their direction).
pub fn violations(x: &[f64], x_prime: &[f64], schema: &[FeatureSchema]) -> (usize, usize) {
    let mut immutable = 0;
    let mut direction = 0;
    for (j, f) in schema.iter().enumerate() {
        if f.is_immutable() && differs(x[j], x_prime[j]) {
            immutable += 1;
        }
        if let Some(d) = f.mutability.direction() {
            if !d.allows(x[j], x_prime[j]) {
                direction += 1;
            }
        }
    }
    (immutable, direction)
}

/// `n` rows of `data` split as evenly as possible across black-box labels,
/// drawn in a seed-determined order.
pub fn select_anchors(
    data: &Dataset,
    model: &dyn BlackBox,
    n: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "anchor count must be positive".into(),
        ));
    }
    let labels = blackbox::predict_labels(model, data.rows())?;
    let classes = model.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class.iter_mut().for_each(|c| c.shuffle(&mut rng));
    let mut chosen = Vec::with_capacity(n);
    let mut cursor = vec![0; classes];
    while chosen.len() < n {
        let before = chosen.len();
        for c in 0..classes {
            if chosen.len() < n && cursor[c] < by_class[c].len() {
                chosen.push(by_class[c][cursor[c]]);
                cursor[c] += 1;
            }
        }
        if chosen.len() == before {
            return Err(Error::InvalidArgument(format!(
                "requested {n} anchors but only {before} rows are available"
            )));
        }
    }
    Ok(chosen.into_iter().map(|i| data.instance(i)).collect())
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub anchor: usize,
    pub id: Option<String>,
    pub fact_label: Option<usize>,
    pub contrast_label: Option<usize>,
    pub fidelity: Option<f64>,
    pub tree_nodes: Option<usize>,
    pub attempts: Option<usize>,
    /// Set when the explanation failed outright.
    pub error: Option<String>,
    pub metrics: Option<MetricsRecord>,
}

impl AnchorRecord {
    pub fn flipped(&self) -> bool {
        self.metrics.as_ref().is_some_and(|m| m.flipped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(Stat {
            mean: values.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub anchors: usize,
    pub failures: usize,
    pub flip_rate: f64,
    pub mean_fidelity: Option<f64>,
    pub min_fidelity: Option<f64>,
    /// Over flipping counterfactuals only.
    pub l0: Option<Stat>,
    pub l2: Option<Stat>,
    pub vae_dist: Option<Stat>,
    pub redundancy: Option<Stat>,
    pub ynn: Option<Stat>,
    pub immutability_violations: usize,
    pub semi_immutability_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_s: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: RecourseConfig,
    pub summary: Summary,
    pub records: Vec<AnchorRecord>,
}

impl Report {
    pub fn summarize(records: &[AnchorRecord], timed: bool) -> Summary {
        let n = records.len();
        let flipped: Vec<&MetricsRecord> = records
            .iter()
            .filter_map(|r| r.metrics.as_ref())
            .filter(|m| m.flipped)
            .collect();
        let all_metrics: Vec<&MetricsRecord> =
            records.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let over = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Option<Stat> {
            Stat::of(&flipped.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
        };
        let fidelities: Vec<f64> = records.iter().filter_map(|r| r.fidelity).collect();
        Summary {
            anchors: n,
            failures: records.iter().filter(|r| r.error.is_some()).count(),
            flip_rate: if n == 0 {
                0.0
            } else {
                records.iter().filter(|r| r.flipped()).count() as f64 / n as f64
            },
            mean_fidelity: Stat::of(&fidelities).map(|s| s.mean),
            min_fidelity: fidelities.iter().copied().min_by(f64::total_cmp),
            l0: over(&|m| Some(m.l0 as f64)),
            l2: over(&|m| Some(m.l2)),
            vae_dist: over(&|m| Some(m.vae_dist)),
            redundancy: over(&|m| m.redundancy.map(|r| r as f64)),
            ynn: over(&|m| Some(m.ynn)),
            immutability_violations: all_metrics.iter().map(|m| m.immutability_violations).sum(),
            semi_immutability_violations: all_metrics
                .iter()
                .map(|m| m.semi_immutability_violations)
                .sum(),
            latency_s: if timed {
                Stat::of(
                    &all_metrics
                        .iter()
                        .filter_map(|m| m.latency_s)
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            },
        }
    }

    /// One CSV row per anchor.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "anchor",
            "id",
            "fact_label",
            "contrast_label",
            "fidelity",
            "tree_nodes",
            "attempts",
            "flipped",
            "l0",
            "l2",
            "vae_dist",
            "redundancy",
            "ynn",
            "immutability_violations",
            "semi_immutability_violations",
            "latency_s",
            "error",
        ])?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.records {
            let m = r.metrics.as_ref();
            w.write_record([
                r.anchor.to_string(),
                opt(r.id.clone()),
                opt(r.fact_label.map(|v| v.to_string())),
                opt(r.contrast_label.map(|v| v.to_string())),
                opt(r.fidelity.map(|v| v.to_string())),
                opt(r.tree_nodes.map(|v| v.to_string())),
                opt(r.attempts.map(|v| v.to_string())),
                r.flipped().to_string(),
                opt(m.map(|m| m.l0.to_string())),
                opt(m.map(|m| m.l2.to_string())),
                opt(m.map(|m| m.vae_dist.to_string())),
                opt(m.and_then(|m| m.redundancy).map(|v| v.to_string())),
                opt(m.map(|m| m.ynn.to_string())),
                opt(m.map(|m| m.immutability_violations.to_string())),
                opt(m.map(|m| m.semi_immutability_violations.to_string())),
                opt(m.and_then(|m| m.latency_s).map(|v| v.to_string())),
                opt(r.error.clone()),
            ])?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema_version: u32,
            config: &'a RecourseConfig,
            summary: &'a Summary,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            schema_version: self.schema_version,
            config: &self.config,
            summary: &self.summary,
        })?)
    }
}

/// Explains every anchor in order and aggregates the results. Explanation
/// failures are recorded per anchor and count as non-flips. Latency covers
/// the whole explain call and is only reported when `timed` is set, so untimed
/// reports are reproducible byte for byte.
pub fn benchmark(
    anchors: &[Instance],
    explainer: &Explainer,
    config: &RecourseConfig,
    timed: bool,
) -> Result<Report> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one anchor".into(),
        ));
    }
    config.validate()?;
    let mut records = Vec::with_capacity(anchors.len());
    for (i, x) in anchors.iter().enumerate() {
        let started = Instant::now();
        let result = explainer.explain(x, config);
        let latency = started.elapsed().as_secs_f64();
        records.push(match result {
            Ok(e) => {
                let mut metrics = e.best.metrics.clone();
                if timed {
                    metrics.latency_s = Some(latency);
                }
                AnchorRecord {
                    anchor: i,
                    id: x.id.clone(),
                    fact_label: Some(e.fact_label),
                    contrast_label: Some(e.contrast_label),
                    fidelity: Some(e.fidelity),
                    tree_nodes: Some(e.tree_nodes),
                    attempts: Some(e.attempts),
                    error: None,
                    metrics: Some(metrics),
                }
            }
            Err(err) => AnchorRecord {
                anchor: i,
                id: x.id.clone(),
                fact_label: None,
                contrast_label: None,
                fidelity: None,
                tree_nodes: None,
                attempts: None,
                error: Some(err.to_string()),
                metrics: None,
            },
        });
    }
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        summary: Report::summarize(&records, timed),
        records,
    })
}

/// Euclidean distance between two latent encodings, recomputed from scratch.
pub fn latent_euclidean(vae: &VaeModel, a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(euclidean(
        &vae.encode_values(a)?.z,
        &vae.encode_values(b)?.z,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Direction, Mutability};

    #[test]
    fn l0_examples() {
        assert_eq!(l0_cost(&[1.0, 2.0], &[1.0, 2.0]), 0);
        assert_eq!(l0_cost(&[1.0, 2.0], &[1.0, 2.5]), 1);
        assert_eq!(l0_cost(&[1.0], &[1.0 + 1e-12]), 0);
    }

    #[test]
    fn l2_examples() {
        let schema = vec![
            FeatureSchema::numeric("a"),
            FeatureSchema::categorical("c", ["p", "q"]),
        ];
        let norm = vec![
            Normalization {
                mean: 0.0,
                std: 2.0,
            },
            Normalization {
                mean: 0.0,
                std: 1.0,
            },
        ];
        assert_eq!(l2_cost(&[1.0, 0.0], &[1.0, 0.0], &schema, &norm), 0.0);
        assert!((l2_cost(&[1.0, 0.0], &[4.0, 0.0], &schema, &norm) - 1.5).abs() < 1e-12);
        assert!((l2_cost(&[1.0, 0.0], &[1.0, 1.0], &schema, &norm) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn violation_examples() {
        let schema = vec![
            FeatureSchema::numeric("race").with_mutability(Mutability::Immutable),
            FeatureSchema::numeric("age").with_mutability(Mutability::SemiImmutable {
                direction: Direction::IncreaseOnly,
            }),
        ];
        assert_eq!(violations(&[1.0, 30.0], &[1.0, 30.0], &schema), (0, 0));
        assert_eq!(violations(&[1.0, 30.0], &[1.0, 29.0], &schema), (0, 1));
        assert_eq!(violations(&[1.0, 30.0], &[2.0, 31.0], &schema), (1, 0));
    }

    #[test]
    fn stats() {
        let s = Stat::of(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!(Stat::of(&[]).is_none());
    }
}
