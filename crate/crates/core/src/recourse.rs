//! End-to-end counterfactual search and realization of rule paths into
//! concrete instances.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blackbox::{self, BlackBox};
use crate::dataset::{Dataset, FeatureSchema, Instance, Mutability};
use crate::error::{Error, FieldError, Result};
use crate::graph::{build_graph, locate_fact_leaf, ContrastPath, Region};
use crate::latent::VaeModel;
use crate::metrics::MetricsRecord;
use crate::neighborhood::{resolve_contrast, NeighborIndex, NeighborSet, Shortfall};
use crate::surrogate::{fidelity, fit_tree, prune, SurrogateTree, TreeConfig};

pub const EXPLANATION_SCHEMA_VERSION: u32 = 1;

/// Where the per-feature standard deviation of the realization margin comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSource {
    /// The pool the neighborhood is drawn from.
    #[default]
    Training,
    /// The sampled neighborhood itself.
    Neighborhood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecourseConfig {
    pub k: usize,
    pub max_search: usize,
    /// Margin divisor: realization noise has standard deviation `sigma / m`.
    pub m: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub prune: bool,
    pub seed: u64,
    pub contrast_class: Option<usize>,
    pub sigma_source: SigmaSource,
}

impl Default for RecourseConfig {
    fn default() -> Self {
        RecourseConfig {
            k: 1000,
            max_search: 50,
            m: 4.0,
            max_depth: 6,
            min_samples_leaf: 5,
            prune: true,
            seed: 0,
            contrast_class: None,
            sigma_source: SigmaSource::Training,
        }
    }
}

impl RecourseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_search == 0 {
            return Err(Error::InvalidArgument(
                "max_search must be at least 1".into(),
            ));
        }
        if self.m.is_nan() || self.m <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "m must be positive, got {}",
                self.m
            )));
        }
        if self.k < 2 || !self.k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "k must be even and >= 2, got {}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Warning {
    /// The surrogate labels the anchor's leaf differently from the black box.
    SurrogateDisagreement,
    /// No realization flipped the black box; the last attempt is returned.
    NonFlipping,
    /// A class had fewer than `k / 2` pool points.
    NeighborShortfall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub x_prime: Instance,
    pub path: ContrastPath,
    pub predicted_label: usize,
    pub contrast_probability: f64,
    pub flipped: bool,
    /// 1-based attempt number that produced this realization.
    pub attempts: usize,
    pub warnings: Vec<Warning>,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub schema_version: u32,
    pub anchor: Instance,
    pub fact_label: usize,
    pub contrast_label: usize,
    pub start_leaf: usize,
    pub fidelity: f64,
    pub tree_nodes: usize,
    pub neighbors: usize,
    pub shortfall: Shortfall,
    pub paths_found: usize,
    pub attempts: usize,
    pub best: Counterfactual,
    pub diverse: Vec<Counterfactual>,
    pub warnings: Vec<Warning>,
}

/// Realizes `path` from `x` with margin noise drawn from `seed`.
pub fn realize(
    x: &Instance,
    path: &ContrastPath,
    schema: &[FeatureSchema],
    m: f64,
    seed: u64,
) -> Result<Instance> {
    let sigma: Vec<f64> = schema.iter().map(|f| f.sigma).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    realize_with(x, path, schema, &sigma, m, &mut rng)
}

/// Copies `x` and moves every changed feature into its target region. Numeric
/// values land `|eps|` beyond the violated bound with `eps ~ N(0, sigma / m)`,
/// clamped to the observed range, the allowed direction and the region;
/// categorical values are assigned exactly.
pub fn realize_with<R: Rng + ?Sized>(
    x: &Instance,
    path: &ContrastPath,
    schema: &[FeatureSchema],
    sigma: &[f64],
    m: f64,
    rng: &mut R,
) -> Result<Instance> {
    let mut values = x.values.clone();
    for fr in &path.regions {
        let spec = &schema[fr.feature];
        let from = x.values[fr.feature];
        values[fr.feature] = match &fr.region {
            Region::Interval { lower, upper } => {
                let std = sigma[fr.feature] / m;
                let eps = if std > 0.0 && std.is_finite() {
                    Normal::new(0.0, std)
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?
                        .sample(rng)
                        .abs()
                } else {
                    0.0
                };
                let proposal = match (lower, upper) {
                    (Some(l), _) if from <= *l => l + eps,
                    (_, Some(u)) if from > *u => u - eps,
                    _ => from,
                };
                let (half_lo, half_hi) = match spec.mutability {
                    Mutability::Mutable => (f64::NEG_INFINITY, f64::INFINITY),
                    Mutability::Immutable => (from, from),
                    Mutability::SemiImmutable { direction } => match direction {
                        crate::dataset::Direction::IncreaseOnly => (from, f64::INFINITY),
                        crate::dataset::Direction::DecreaseOnly => (f64::NEG_INFINITY, from),
                    },
                };
                let lo = lower
                    .map_or(f64::NEG_INFINITY, f64::next_up)
                    .max(spec.observed_min)
                    .max(half_lo);
                let hi = upper
                    .unwrap_or(f64::INFINITY)
                    .min(spec.observed_max)
                    .min(half_hi);
                if lo > hi {
                    return Err(Error::InfeasibleRealization(format!(
                        "no value of {} satisfies the rule within its allowed range",
                        spec.name
                    )));
                }
                proposal.clamp(lo, hi)
            }
            Region::Categories { allowed } => allowed
                .iter()
                .map(|&c| c as f64)
                .find(|&c| spec.mutability.allows(from, c))
                .ok_or_else(|| {
                    Error::InfeasibleRealization(format!(
                        "no allowed category of {} satisfies the rule",
                        spec.name
                    ))
                })?,
        };
    }
    Ok(Instance {
        values,
        id: x.id.clone(),
    })
}

/// Population standard deviation of each feature over the neighborhood members.
pub fn neighborhood_sigma(neighbors: &NeighborSet, n_features: usize) -> Vec<f64> {
    let n = neighbors.members.len().max(1) as f64;
    (0..n_features)
        .map(|j| {
            let mean = neighbors.members.iter().map(|m| m.values[j]).sum::<f64>() / n;
            let var = neighbors
                .members
                .iter()
                .map(|m| (m.values[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            var.sqrt()
        })
        .collect()
}

/// Trained artifacts shared by every explanation, plus the pool's cached
/// encodings and black-box labels.
pub struct Explainer {
    model: Arc<dyn BlackBox>,
    pool: Arc<Dataset>,
    vae: Arc<VaeModel>,
    index: NeighborIndex,
}

impl Explainer {
    pub fn new(model: Arc<dyn BlackBox>, pool: Arc<Dataset>, vae: Arc<VaeModel>) -> Result<Self> {
        let index = NeighborIndex::build(&pool, model.as_ref(), &vae)?;
        Ok(Explainer {
            model,
            pool,
            vae,
            index,
        })
    }

    pub fn model(&self) -> &dyn BlackBox {
        self.model.as_ref()
    }

    pub fn pool(&self) -> &Dataset {
        &self.pool
    }

    pub fn vae(&self) -> &VaeModel {
        &self.vae
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    pub fn schema(&self) -> &[FeatureSchema] {
        self.pool.schema()
    }

    pub fn explain(&self, x: &Instance, config: &RecourseConfig) -> Result<Explanation> {
        Ok(Session::start(self, x, config)?.explanation)
    }
}

/// Per-feature and per-run adjustments applied on top of a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub edit_costs: BTreeMap<String, f64>,
    pub mutability: BTreeMap<String, Mutability>,
    pub m: Option<f64>,
    pub contrast_class: Option<usize>,
    pub max_search: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        *self == Overrides::default()
    }

    /// Applies the feature overrides to `schema`, collecting every invalid entry.
    pub fn apply_to_schema(&self, schema: &[FeatureSchema]) -> Result<Vec<FeatureSchema>> {
        let mut out = schema.to_vec();
        let mut errors = Vec::new();
        let position = |name: &str| out.iter().position(|f| f.name == name);
        let mut cost_updates = Vec::new();
        for (name, &cost) in &self.edit_costs {
            match position(name) {
                None => errors.push(FieldError::new(name, "unknown feature")),
                Some(_) if !(cost > 0.0 && cost.is_finite()) => errors.push(FieldError::new(
                    name,
                    format!("edit cost must be positive and finite, got {cost}"),
                )),
                Some(j) => cost_updates.push((j, cost)),
            }
        }
        let mut mutability_updates = Vec::new();
        for (name, &mutability) in &self.mutability {
            match position(name) {
                None => errors.push(FieldError::new(name, "unknown feature")),
                Some(j) => mutability_updates.push((j, mutability)),
            }
        }
        if !errors.is_empty() {
            return Err(Error::InvalidInstance(errors));
        }
        for (j, cost) in cost_updates {
            out[j].edit_cost = cost;
        }
        for (j, mutability) in mutability_updates {
            out[j].mutability = mutability;
        }
        Ok(out)
    }

    pub fn apply_to_config(&self, config: &RecourseConfig) -> RecourseConfig {
        let mut out = config.clone();
        if let Some(m) = self.m {
            out.m = m;
        }
        if self.contrast_class.is_some() {
            out.contrast_class = self.contrast_class;
        }
        if let Some(max_search) = self.max_search {
            out.max_search = max_search;
        }
        if let Some(seed) = self.seed {
            out.seed = seed;
        }
        out
    }
}

/// Cached state of one anchor's explanation, reusable by what-if queries.
#[derive(Debug, Clone)]
pub struct Session {
    anchor: Instance,
    config: RecourseConfig,
    schema: Vec<FeatureSchema>,
    fact_label: usize,
    neighbors: NeighborSet,
    tree: SurrogateTree,
    fidelity: f64,
    explanation: Explanation,
    elapsed: Duration,
}

/// Which stages a what-if query had to recompute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rebuilt {
    Search,
    Tree,
    Neighborhood,
}

impl Session {
    pub fn start(explainer: &Explainer, x: &Instance, config: &RecourseConfig) -> Result<Session> {
        let started = Instant::now();
        config.validate()?;
        crate::dataset::validate_values(explainer.schema(), &x.values)?;
        let schema = explainer.schema().to_vec();
        let (fact_label, _) = blackbox::predict(explainer.model(), x)?;
        let neighbors = sample(explainer, x, config, fact_label)?;
        let (tree, fidelity) = fit(&neighbors, &schema, config)?;
        let explanation = search(explainer, x, config, &schema, &neighbors, &tree, fidelity)?;
        Ok(Session {
            anchor: x.clone(),
            config: config.clone(),
            schema,
            fact_label,
            neighbors,
            tree,
            fidelity,
            explanation,
            elapsed: started.elapsed(),
        })
    }

    pub fn explanation(&self) -> &Explanation {
        &self.explanation
    }

    /// Wall-clock time of the most recent explain or what-if computation.
    pub fn elapsed(&self) -> Duration {
        self.elapsed
    }

    pub fn tree(&self) -> &SurrogateTree {
        &self.tree
    }

    pub fn schema(&self) -> &[FeatureSchema] {
        &self.schema
    }

    pub fn config(&self) -> &RecourseConfig {
        &self.config
    }

    pub fn neighbors(&self) -> &NeighborSet {
        &self.neighbors
    }

    pub fn anchor(&self) -> &Instance {
        &self.anchor
    }

    /// Re-runs the pipeline with `overrides` applied, recomputing only the
    /// stages they invalidate. On error the session is left unchanged.
    pub fn what_if(&mut self, explainer: &Explainer, overrides: &Overrides) -> Result<Rebuilt> {
        let started = Instant::now();
        let schema = overrides.apply_to_schema(&self.schema)?;
        let config = overrides.apply_to_config(&self.config);
        config.validate()?;
        let resample = config.contrast_class != self.config.contrast_class;
        let refit = immutable_set(&schema) != immutable_set(&self.schema);
        let (neighbors, rebuilt) = if resample {
            (
                sample(explainer, &self.anchor, &config, self.fact_label)?,
                Rebuilt::Neighborhood,
            )
        } else if refit {
            (self.neighbors.clone(), Rebuilt::Tree)
        } else {
            (self.neighbors.clone(), Rebuilt::Search)
        };
        let (tree, fidelity) = if rebuilt == Rebuilt::Search {
            (self.tree.clone(), self.fidelity)
        } else {
            fit(&neighbors, &schema, &config)?
        };
        let explanation = search(
            explainer,
            &self.anchor,
            &config,
            &schema,
            &neighbors,
            &tree,
            fidelity,
        )?;
        self.schema = schema;
        self.config = config;
        self.neighbors = neighbors;
        self.tree = tree;
        self.fidelity = fidelity;
        self.explanation = explanation;
        self.elapsed = started.elapsed();
        Ok(rebuilt)
    }
}

fn immutable_set(schema: &[FeatureSchema]) -> Vec<usize> {
    (0..schema.len())
        .filter(|&j| schema[j].is_immutable())
        .collect()
}

fn sample(
    explainer: &Explainer,
    x: &Instance,
    config: &RecourseConfig,
    fact_label: usize,
) -> Result<NeighborSet> {
    let contrast = resolve_contrast(
        explainer.model().class_count(),
        fact_label,
        config.contrast_class,
    )?;
    explainer
        .index()
        .sample(x, explainer.vae(), config.k, fact_label, contrast)
}

fn fit(
    neighbors: &NeighborSet,
    schema: &[FeatureSchema],
    config: &RecourseConfig,
) -> Result<(SurrogateTree, f64)> {
    let mut tree = fit_tree(neighbors, schema, &config.tree_config())?;
    if config.prune {
        tree = prune(&tree, neighbors);
    }
    let fid = fidelity(&tree, neighbors);
    Ok((tree, fid))
}

struct Attempt {
    path: usize,
    candidate: Counterfactual,
}

fn search(
    explainer: &Explainer,
    x: &Instance,
    config: &RecourseConfig,
    schema: &[FeatureSchema],
    neighbors: &NeighborSet,
    tree: &SurrogateTree,
    fidelity: f64,
) -> Result<Explanation> {
    let fact = neighbors.fact_label;
    let contrast = neighbors.contrast_label;
    let graph = build_graph(tree, &x.values, schema, fact, contrast)?;
    let (start_leaf, agrees) = locate_fact_leaf(tree, &x.values, fact);
    let paths = graph.shortest_paths();
    if paths.is_empty() {
        return Err(Error::NoPath);
    }
    let sigma = match config.sigma_source {
        SigmaSource::Training => schema.iter().map(|f| f.sigma).collect(),
        SigmaSource::Neighborhood => neighborhood_sigma(neighbors, schema.len()),
    };
    let mut common = Vec::new();
    if !agrees {
        common.push(Warning::SurrogateDisagreement);
    }
    if neighbors.has_shortfall() {
        common.push(Warning::NeighborShortfall);
    }

    let mut attempts: Vec<Attempt> = Vec::new();
    let mut done = vec![false; paths.len()];
    'rounds: loop {
        let mut progressed = false;
        for (p, path) in paths.iter().enumerate() {
            if done[p] {
                continue;
            }
            if attempts.len() >= config.max_search {
                break 'rounds;
            }
            let attempt = attempts.len();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(attempt as u64);
            let x_prime = match realize_with(x, path, schema, &sigma, config.m, &mut rng) {
                Ok(v) => v,
                Err(Error::InfeasibleRealization(_)) => {
                    done[p] = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (label, proba) = blackbox::predict(explainer.model(), &x_prime)?;
            let flipped = label == contrast;
            done[p] = flipped;
            progressed = true;
            let metrics = MetricsRecord::compute(explainer, x, &x_prime, schema, contrast)?;
            attempts.push(Attempt {
                path: p,
                candidate: Counterfactual {
                    x_prime,
                    path: path.clone(),
                    predicted_label: label,
                    contrast_probability: proba[contrast],
                    flipped,
                    attempts: attempt + 1,
                    warnings: common.clone(),
                    metrics,
                },
            });
        }
        if !progressed {
            break;
        }
    }
    let Some(last) = attempts.last() else {
        return Err(Error::InfeasibleRealization(
            "no path could be realized".into(),
        ));
    };
    let best = match attempts.iter().find(|a| a.candidate.flipped) {
        Some(a) => a.candidate.clone(),
        None => {
            let mut c = last.candidate.clone();
            c.warnings.push(Warning::NonFlipping);
            c
        }
    };
    let mut diverse = Vec::new();
    let mut seen = HashSet::new();
    for p in 0..paths.len() {
        let mut of_path = attempts.iter().filter(|a| a.path == p);
        let chosen = of_path
            .clone()
            .find(|a| a.candidate.flipped)
            .or_else(|| of_path.next_back());
        if let Some(a) = chosen {
            if seen.insert(a.candidate.path.rule_key()) {
                let mut c = a.candidate.clone();
                if !c.flipped {
                    c.warnings.push(Warning::NonFlipping);
                }
                diverse.push(c);
            }
        }
    }
    let mut warnings = best.warnings.clone();
    warnings.dedup();
    Ok(Explanation {
        schema_version: EXPLANATION_SCHEMA_VERSION,
        anchor: x.clone(),
        fact_label: fact,
        contrast_label: contrast,
        start_leaf,
        fidelity,
        tree_nodes: tree.len(),
        neighbors: neighbors.members.len(),
        shortfall: neighbors.shortfall,
        paths_found: paths.len(),
        attempts: attempts.len(),
        best,
        diverse,
        warnings,
    })
}

/// Convenience wrapper that builds an [`Explainer`] for a single query.
pub fn explain(
    x: &Instance,
    model: Arc<dyn BlackBox>,
    pool: Arc<Dataset>,
    vae: Arc<VaeModel>,
    config: &RecourseConfig,
) -> Result<Explanation> {
    Explainer::new(model, pool, vae)?.explain(x, config)
}
