//! Tabular data ingestion, the annotated feature schema, and normalization.
//!
//! Values are stored as `f64` throughout. Categorical values are stored as the
//! index of the category in the feature's category list, so one row is always
//! a flat vector with one slot per feature. Vector consumers (black boxes, the
//! VAE) go through [`FeatureEncoder`], which standardizes numeric features and
//! one-hot encodes categorical ones.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};

/// Numeric tolerance used when deciding whether two feature values differ.
pub const VALUE_TOLERANCE: f64 = 1e-9;

/// Allowed direction of change for a semi-immutable feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[serde(alias = "increase")]
    IncreaseOnly,
    #[serde(alias = "decrease")]
    DecreaseOnly,
}

impl Direction {
    /// Whether moving a value from `from` to `to` respects this direction.
    pub fn allows(self, from: f64, to: f64) -> bool {
        match self {
            Direction::IncreaseOnly => to >= from - VALUE_TOLERANCE,
            Direction::DecreaseOnly => to <= from + VALUE_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "kebab-case")]
pub enum Mutability {
    Mutable,
    Immutable,
    SemiImmutable { direction: Direction },
}

impl Mutability {
    pub fn direction(&self) -> Option<Direction> {
        match self {
            Mutability::SemiImmutable { direction } => Some(*direction),
            _ => None,
        }
    }

    /// Whether changing a value from `from` to `to` is allowed.
    pub fn allows(&self, from: f64, to: f64) -> bool {
        let unchanged = (from - to).abs() <= VALUE_TOLERANCE;
        match self {
            Mutability::Mutable => true,
            Mutability::Immutable => unchanged,
            Mutability::SemiImmutable { direction } => direction.allows(from, to),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

/// One column of the feature space with its actionability annotations and the
/// statistics observed on the data it was loaded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    pub mutability: Mutability,
    pub edit_cost: f64,
    pub observed_min: f64,
    pub observed_max: f64,
    /// Population standard deviation of the feature.
    pub sigma: f64,
}

impl FeatureSchema {
    pub fn numeric(name: impl Into<String>) -> Self {
        FeatureSchema {
            name: name.into(),
            kind: FeatureKind::Numeric,
            mutability: Mutability::Mutable,
            edit_cost: 1.0,
            observed_min: 0.0,
            observed_max: 0.0,
            sigma: 0.0,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        FeatureSchema {
            kind: FeatureKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
            ..FeatureSchema::numeric(name)
        }
    }

    pub fn with_mutability(mut self, mutability: Mutability) -> Self {
        self.mutability = mutability;
        self
    }

    pub fn with_edit_cost(mut self, edit_cost: f64) -> Self {
        self.edit_cost = edit_cost;
        self
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric)
    }

    pub fn is_immutable(&self) -> bool {
        self.mutability == Mutability::Immutable
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { categories } => Some(categories),
            FeatureKind::Numeric => None,
        }
    }

    /// Number of slots this feature occupies in an encoded vector.
    pub fn encoded_width(&self) -> usize {
        self.categories().map_or(1, <[String]>::len)
    }

    /// Human-readable form of a stored value.
    pub fn display_value(&self, value: f64) -> String {
        match self.categories() {
            Some(categories) => categories
                .get(value as usize)
                .cloned()
                .unwrap_or_else(|| format!("#{value}")),
            None => format!("{value}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("feature with empty name".into()));
        }
        if !(self.edit_cost > 0.0 && self.edit_cost.is_finite()) {
            return Err(Error::Schema(format!(
                "feature '{}': edit_cost must be positive and finite",
                self.name
            )));
        }
        if self.observed_min > self.observed_max {
            return Err(Error::Schema(format!(
                "feature '{}': observed_min > observed_max",
                self.name
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::Schema(format!(
                "feature '{}': negative sigma",
                self.name
            )));
        }
        if let FeatureKind::Categorical { categories } = &self.kind {
            if categories.len() < 2 {
                return Err(Error::Schema(format!(
                    "categorical feature '{}' needs at least 2 categories",
                    self.name
                )));
            }
            if self.mutability.direction().is_some() {
                return Err(Error::Schema(format!(
                    "categorical feature '{}' cannot carry a direction",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn check_value(&self, value: f64) -> std::result::Result<(), String> {
        if !value.is_finite() {
            return Err("value is not finite".into());
        }
        if let Some(categories) = self.categories() {
            if value.fract() != 0.0 || value < 0.0 || value as usize >= categories.len() {
                return Err(format!(
                    "category index {value} out of range 0..{}",
                    categories.len()
                ));
            }
        }
        Ok(())
    }
}

/// Checks that `values` conforms to `schema`, collecting one error per bad field.
pub fn validate_values(schema: &[FeatureSchema], values: &[f64]) -> Result<()> {
    if values.len() != schema.len() {
        return Err(Error::Dimension {
            expected: schema.len(),
            got: values.len(),
        });
    }
    let errors: Vec<FieldError> = schema
        .iter()
        .zip(values)
        .filter_map(|(feature, &v)| {
            feature.check_value(v).err().map(|message| FieldError {
                feature: feature.name.clone(),
                message,
            })
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidInstance(errors))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Instance {
    pub fn new(values: Vec<f64>) -> Self {
        Instance { values, id: None }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-feature standardization record. Categorical features carry (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// A contiguous range of an encoded vector belonging to one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodedBlock {
    pub feature: usize,
    pub offset: usize,
    pub width: usize,
    pub categorical: bool,
}

/// Maps instances to the vectors consumed by models: standardized numerics
/// and one-hot categoricals, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    schema: Vec<FeatureSchema>,
    normalization: Vec<Normalization>,
}

impl FeatureEncoder {
    pub fn new(schema: Vec<FeatureSchema>, normalization: Vec<Normalization>) -> Result<Self> {
        if schema.len() != normalization.len() {
            return Err(Error::Dimension {
                expected: schema.len(),
                got: normalization.len(),
            });
        }
        Ok(FeatureEncoder {
            schema,
            normalization,
        })
    }

    pub fn schema(&self) -> &[FeatureSchema] {
        &self.schema
    }

    pub fn normalization(&self) -> &[Normalization] {
        &self.normalization
    }

    pub fn width(&self) -> usize {
        self.schema.iter().map(FeatureSchema::encoded_width).sum()
    }

    pub fn blocks(&self) -> Vec<EncodedBlock> {
        let mut offset = 0;
        self.schema
            .iter()
            .enumerate()
            .map(|(feature, f)| {
                let block = EncodedBlock {
                    feature,
                    offset,
                    width: f.encoded_width(),
                    categorical: !f.is_numeric(),
                };
                offset += block.width;
                block
            })
            .collect()
    }

    pub fn encode(&self, values: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        self.encode_into(values, &mut out)?;
        Ok(out)
    }

    /// Appends the encoding of `values` to `out`.
    pub fn encode_into(&self, values: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if values.len() != self.schema.len() {
            return Err(Error::Dimension {
                expected: self.schema.len(),
                got: values.len(),
            });
        }
        for ((feature, norm), &v) in self.schema.iter().zip(&self.normalization).zip(values) {
            match feature.categories() {
                Some(categories) => {
                    let start = out.len();
                    out.resize(start + categories.len(), 0.0);
                    let idx = v as usize;
                    if idx < categories.len() {
                        out[start + idx] = 1.0;
                    }
                }
                None => out.push((v - norm.mean) / norm.std),
            }
        }
        Ok(())
    }

    /// Standardizes numeric values, leaving categorical indices untouched.
    pub fn normalize(&self, x: &Instance) -> Result<Instance> {
        validate_values(&self.schema, &x.values)?;
        let values = self
            .schema
            .iter()
            .zip(&self.normalization)
            .zip(&x.values)
            .map(|((f, n), &v)| {
                if f.is_numeric() {
                    (v - n.mean) / n.std
                } else {
                    v
                }
            })
            .collect();
        Ok(Instance {
            values,
            id: x.id.clone(),
        })
    }

    pub fn denormalize(&self, x: &Instance) -> Result<Instance> {
        validate_values(&self.schema, &x.values)?;
        let values = self
            .schema
            .iter()
            .zip(&self.normalization)
            .zip(&x.values)
            .map(|((f, n), &v)| {
                if f.is_numeric() {
                    v * n.std + n.mean
                } else {
                    v
                }
            })
            .collect();
        Ok(Instance {
            values,
            id: x.id.clone(),
        })
    }
}

/// One-hot vector of length `n` with a 1 at `index`.
pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if index < n {
        v[index] = 1.0;
    }
    v
}

/// Class label column declared in a schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelColumn {
    pub name: String,
    /// Names for string-valued labels; integer labels are used as-is when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

/// Parsed contents of a schema file.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaFile {
    pub features: Vec<FeatureSchema>,
    pub label: Option<LabelColumn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ColumnSpec {
    name: String,
    kind: String,
    #[serde(default)]
    categories: Option<Vec<String>>,
    #[serde(default)]
    mutability: Option<String>,
    #[serde(default)]
    direction: Option<String>,
    #[serde(default)]
    edit_cost: Option<f64>,
}

pub fn parse_schema(text: &str) -> Result<SchemaFile> {
    let specs: Vec<ColumnSpec> = serde_json::from_str(text)?;
    let mut features = Vec::new();
    let mut label = None;
    let mut seen = HashMap::new();
    for spec in specs {
        if seen.insert(spec.name.clone(), ()).is_some() {
            return Err(Error::Schema(format!("duplicate column '{}'", spec.name)));
        }
        let mutability = match (spec.mutability.as_deref(), spec.direction.as_deref()) {
            (None | Some("mutable"), None) => Mutability::Mutable,
            (Some("immutable"), None) => Mutability::Immutable,
            (Some("semi-immutable"), Some(d)) => Mutability::SemiImmutable {
                direction: match d {
                    "increase-only" | "increase" => Direction::IncreaseOnly,
                    "decrease-only" | "decrease" => Direction::DecreaseOnly,
                    other => {
                        return Err(Error::Schema(format!(
                            "column '{}': unknown direction '{other}'",
                            spec.name
                        )))
                    }
                },
            },
            (Some("semi-immutable"), None) => {
                return Err(Error::Schema(format!(
                    "column '{}': semi-immutable requires a direction",
                    spec.name
                )))
            }
            (Some(m), None) => {
                return Err(Error::Schema(format!(
                    "column '{}': unknown mutability '{m}'",
                    spec.name
                )))
            }
            (_, Some(_)) => {
                return Err(Error::Schema(format!(
                    "column '{}': direction is only valid for semi-immutable features",
                    spec.name
                )))
            }
        };
        let kind = match spec.kind.as_str() {
            "numeric" => {
                if spec.categories.is_some() {
                    return Err(Error::Schema(format!(
                        "numeric column '{}' cannot list categories",
                        spec.name
                    )));
                }
                FeatureKind::Numeric
            }
            "categorical" => FeatureKind::Categorical {
                categories: spec.categories.ok_or_else(|| {
                    Error::Schema(format!(
                        "categorical column '{}' must list categories",
                        spec.name
                    ))
                })?,
            },
            "label" => {
                if label.is_some() {
                    return Err(Error::Schema("more than one label column".into()));
                }
                label = Some(LabelColumn {
                    name: spec.name,
                    categories: spec.categories,
                });
                continue;
            }
            other => {
                return Err(Error::Schema(format!(
                    "column '{}': unknown kind '{other}'",
                    spec.name
                )))
            }
        };
        let feature = FeatureSchema {
            name: spec.name,
            kind,
            mutability,
            edit_cost: spec.edit_cost.unwrap_or(1.0),
            observed_min: 0.0,
            observed_max: 0.0,
            sigma: 0.0,
        };
        feature.validate()?;
        features.push(feature);
    }
    if features.is_empty() {
        return Err(Error::Schema("schema declares no features".into()));
    }
    Ok(SchemaFile { features, label })
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<SchemaFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schema(&text)
}

/// An immutable table of instances conforming to a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Vec<FeatureSchema>,
    rows: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
    label_column: Option<LabelColumn>,
    normalization: Vec<Normalization>,
    row_ids: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset and computes observed statistics and normalization
    /// from `rows`.
    pub fn new(
        schema: Vec<FeatureSchema>,
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let row_ids = (0..rows.len()).collect();
        Self::build(schema, rows, labels, row_ids)
    }

    fn build(
        mut schema: Vec<FeatureSchema>,
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        row_ids: Vec<usize>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != rows.len() {
                return Err(Error::Dimension {
                    expected: rows.len(),
                    got: labels.len(),
                });
            }
        }
        for (i, row) in rows.iter().enumerate() {
            validate_values(&schema, row).map_err(|e| match e {
                Error::InvalidInstance(errors) => Error::Row {
                    row: i + 1,
                    column: errors[0].feature.clone(),
                    message: errors[0].message.clone(),
                },
                other => other,
            })?;
        }
        let normalization = compute_statistics(&mut schema, &rows);
        for f in &schema {
            f.validate()?;
        }
        Ok(Dataset {
            schema,
            rows,
            labels,
            label_column: None,
            normalization,
            row_ids,
        })
    }

    pub fn schema(&self) -> &[FeatureSchema] {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_label_column(mut self, label: LabelColumn) -> Self {
        self.label_column = Some(label);
        self
    }

    pub fn label_column(&self) -> Option<&LabelColumn> {
        self.label_column.as_ref()
    }

    pub fn normalization(&self) -> &[Normalization] {
        &self.normalization
    }

    /// Original row positions (in the loaded file) of each row.
    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn instance(&self, i: usize) -> Instance {
        Instance::new(self.rows[i].clone()).with_id(self.row_ids[i].to_string())
    }

    pub fn encoder(&self) -> FeatureEncoder {
        FeatureEncoder {
            schema: self.schema.clone(),
            normalization: self.normalization.clone(),
        }
    }

    pub fn normalize(&self, x: &Instance) -> Result<Instance> {
        self.encoder().normalize(x)
    }

    pub fn denormalize(&self, x: &Instance) -> Result<Instance> {
        self.encoder().denormalize(x)
    }

    /// Number of distinct label values, i.e. `max(label) + 1`.
    pub fn class_count(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// A new dataset holding the given rows; statistics are recomputed from them.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let row_ids = indices.iter().map(|&i| self.row_ids[i]).collect();
        let mut out = Self::build(self.schema.clone(), rows, labels, row_ids)?;
        out.label_column = self.label_column.clone();
        Ok(out)
    }

    /// Deterministic shuffled partition into (train, test). Statistics of
    /// both parts come from the training part only.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train_fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let n = self.len();
        let n_train = (n as f64 * train_fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::InvalidArgument(format!(
                "split of {n} rows at fraction {train_fraction} leaves an empty partition"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train_idx, test_idx) = order.split_at(n_train);
        let train = self.select(train_idx)?;
        let mut test = self.select(test_idx)?;
        test.schema = train.schema.clone();
        test.normalization = train.normalization.clone();
        Ok((train, test))
    }

    /// Replaces annotations (mutability, edit cost) while keeping statistics.
    pub fn with_annotations(&self, schema: &[FeatureSchema]) -> Result<Dataset> {
        if schema.len() != self.schema.len() {
            return Err(Error::Dimension {
                expected: self.schema.len(),
                got: schema.len(),
            });
        }
        let mut out = self.clone();
        for (dst, src) in out.schema.iter_mut().zip(schema) {
            if dst.name != src.name || dst.kind != src.kind {
                return Err(Error::Schema(format!(
                    "annotation for '{}' does not match feature '{}'",
                    src.name, dst.name
                )));
            }
            dst.mutability = src.mutability;
            dst.edit_cost = src.edit_cost;
            dst.validate()?;
        }
        Ok(out)
    }
}

fn compute_statistics(schema: &mut [FeatureSchema], rows: &[Vec<f64>]) -> Vec<Normalization> {
    let n = rows.len() as f64;
    schema
        .iter_mut()
        .enumerate()
        .map(
            |(j, feature)| match feature.categories().map(<[String]>::len) {
                Some(n_categories) => {
                    feature.observed_min = 0.0;
                    feature.observed_max = (n_categories - 1) as f64;
                    feature.sigma = 0.0;
                    Normalization {
                        mean: 0.0,
                        std: 1.0,
                    }
                }
                None => {
                    let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                    let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                    let sigma = var.sqrt();
                    feature.observed_min = rows.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                    feature.observed_max =
                        rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                    feature.sigma = sigma;
                    Normalization {
                        mean,
                        // constant columns keep std 1 so standardization stays defined
                        std: if sigma > 1e-12 { sigma } else { 1.0 },
                    }
                }
            },
        )
        .collect()
}

/// Schema-file text for `features` and an optional label column, in the
/// format [`parse_schema`] reads. Observed statistics are not written.
pub fn schema_to_json(features: &[FeatureSchema], label: Option<&LabelColumn>) -> String {
    let mut columns: Vec<serde_json::Value> = features
        .iter()
        .map(|f| {
            let mut c = serde_json::json!({ "name": f.name });
            match &f.kind {
                FeatureKind::Numeric => c["kind"] = "numeric".into(),
                FeatureKind::Categorical { categories } => {
                    c["kind"] = "categorical".into();
                    c["categories"] = serde_json::json!(categories);
                }
            }
            match f.mutability {
                Mutability::Mutable => {}
                Mutability::Immutable => c["mutability"] = "immutable".into(),
                Mutability::SemiImmutable { direction } => {
                    c["mutability"] = "semi-immutable".into();
                    c["direction"] = serde_json::to_value(direction).expect("enum serializes");
                }
            }
            if f.edit_cost != 1.0 {
                c["edit_cost"] = f.edit_cost.into();
            }
            c
        })
        .collect();
    if let Some(label) = label {
        let mut c = serde_json::json!({ "name": label.name, "kind": "label" });
        if let Some(categories) = &label.categories {
            c["categories"] = serde_json::json!(categories);
        }
        columns.push(c);
    }
    serde_json::to_string_pretty(&columns).expect("json values serialize")
}

impl Dataset {
    /// Writes the rows as CSV with categories by name; the inverse of
    /// [`read_dataset`]. Labels are written when present, under the label
    /// column name or `label`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let label_name = self
            .label_column
            .as_ref()
            .map_or("label", |l| l.name.as_str());
        let mut header: Vec<&str> = self.schema.iter().map(|f| f.name.as_str()).collect();
        if self.labels.is_some() {
            header.push(label_name);
        }
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut record: Vec<String> = self
                .schema
                .iter()
                .zip(row)
                .map(|(f, &v)| match f.categories() {
                    Some(c) => c[v as usize].clone(),
                    None => v.to_string(),
                })
                .collect();
            if let Some(labels) = &self.labels {
                let l = labels[i];
                record.push(
                    match self
                        .label_column
                        .as_ref()
                        .and_then(|c| c.categories.as_ref())
                    {
                        Some(names) => names[l].clone(),
                        None => l.to_string(),
                    },
                );
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Loads a header-first CSV file and validates it against a schema file.
pub fn load_dataset(data_file: impl AsRef<Path>, schema_file: impl AsRef<Path>) -> Result<Dataset> {
    let schema = load_schema(schema_file)?;
    let data_file = data_file.as_ref();
    let file = std::fs::File::open(data_file).map_err(|e| Error::io(data_file, e))?;
    read_dataset(file, &schema)
}

/// Reads CSV data from any reader; see [`load_dataset`].
pub fn read_dataset<R: std::io::Read>(reader: R, schema: &SchemaFile) -> Result<Dataset> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = csv
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let position = |name: &str| header.iter().position(|h| h == name);

    let mut columns = Vec::with_capacity(schema.features.len());
    for f in &schema.features {
        columns.push(position(&f.name).ok_or_else(|| Error::Row {
            row: 0,
            column: f.name.clone(),
            message: "column missing from header".into(),
        })?);
    }
    let label_col = match &schema.label {
        Some(label) => Some(position(&label.name).ok_or_else(|| Error::Row {
            row: 0,
            column: label.name.clone(),
            message: "label column missing from header".into(),
        })?),
        None => None,
    };
    for h in &header {
        let declared = schema.features.iter().any(|f| &f.name == h)
            || schema.label.as_ref().is_some_and(|l| &l.name == h);
        if !declared {
            return Err(Error::Row {
                row: 0,
                column: h.clone(),
                message: "column not declared in schema".into(),
            });
        }
    }

    let mut rows = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for (i, record) in csv.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let cell = |col: usize, name: &str| -> Result<&str> {
            match record.get(col).map(str::trim) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(Error::Row {
                    row: row_no,
                    column: name.to_string(),
                    message: "missing value".into(),
                }),
            }
        };
        let mut row = Vec::with_capacity(columns.len());
        for (f, &col) in schema.features.iter().zip(&columns) {
            let text = cell(col, &f.name)?;
            let value = match f.categories() {
                Some(categories) => {
                    categories
                        .iter()
                        .position(|c| c == text)
                        .ok_or_else(|| Error::Row {
                            row: row_no,
                            column: f.name.clone(),
                            message: format!("unknown category '{text}'"),
                        })? as f64
                }
                None => text
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Row {
                        row: row_no,
                        column: f.name.clone(),
                        message: format!("non-numeric value '{text}'"),
                    })?,
            };
            row.push(value);
        }
        if let (Some(col), Some(labels), Some(spec)) = (label_col, labels.as_mut(), &schema.label) {
            let text = cell(col, &spec.name)?;
            let label = match &spec.categories {
                Some(categories) => categories.iter().position(|c| c == text),
                None => text.parse::<usize>().ok(),
            }
            .ok_or_else(|| Error::Row {
                row: row_no,
                column: spec.name.clone(),
                message: format!("invalid label '{text}'"),
            })?;
            labels.push(label);
        }
        rows.push(row);
    }
    let mut dataset = Dataset::new(schema.features.clone(), rows, labels)?;
    dataset.label_column = schema.label.clone();
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &str = r#"[
        {"name": "age", "kind": "numeric", "mutability": "semi-immutable", "direction": "increase-only"},
        {"name": "sex", "kind": "categorical", "categories": ["f", "m"], "mutability": "immutable"},
        {"name": "y", "kind": "label"}
    ]"#;

    fn read(csv: &str) -> Result<Dataset> {
        read_dataset(csv.as_bytes(), &parse_schema(SCHEMA).unwrap())
    }

    #[test]
    fn loads_minimal_file() {
        let ds = read("age,sex,y\n30,f,0\n40,m,1\n50,f,1\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.labels(), Some(&[0, 1, 1][..]));
        assert_eq!(ds.row(1), &[40.0, 1.0]);
        assert_eq!(ds.schema()[0].observed_min, 30.0);
        assert_eq!(ds.schema()[0].observed_max, 50.0);
    }

    #[test]
    fn csv_and_schema_round_trip() {
        let ds = read("age,sex,y\n30,f,0\n40.5,m,1\n50,f,1\n").unwrap();
        let schema = parse_schema(&schema_to_json(ds.schema(), ds.label_column())).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), &schema).unwrap();
        assert_eq!(back.rows(), ds.rows());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.schema(), ds.schema());
    }

    #[test]
    fn unknown_category_names_row_and_column() {
        let err = read("age,sex,y\n30,f,0\n40,X,1\n").unwrap_err();
        match err {
            Error::Row { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "sex");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_non_numeric_values_rejected() {
        assert!(matches!(
            read("age,y\n30,0\n").unwrap_err(),
            Error::Row { row: 0, .. }
        ));
        assert!(matches!(
            read("age,sex,y\nabc,f,0\n").unwrap_err(),
            Error::Row { row: 1, .. }
        ));
        assert!(matches!(
            read("age,sex,y\n,f,0\n").unwrap_err(),
            Error::Row { row: 1, .. }
        ));
        assert!(matches!(
            read("age,sex,y,extra\n1,f,0,2\n").unwrap_err(),
            Error::Row { row: 0, .. }
        ));
    }

    #[test]
    fn schema_rejects_unknown_keys_and_bad_annotations() {
        assert!(parse_schema(r#"[{"name":"a","kind":"numeric","colour":1}]"#).is_err());
        assert!(parse_schema(r#"[{"name":"a","kind":"numeric","edit_cost":0}]"#).is_err());
        assert!(parse_schema(r#"[{"name":"a","kind":"categorical","categories":["x"]}]"#).is_err());
        assert!(parse_schema(
            r#"[{"name":"a","kind":"categorical","categories":["x","y"],"mutability":"semi-immutable","direction":"increase-only"}]"#
        )
        .is_err());
        assert!(
            parse_schema(r#"[{"name":"a","kind":"numeric","mutability":"semi-immutable"}]"#)
                .is_err()
        );
    }

    #[test]
    fn constant_column_has_zero_sigma_and_unit_std() {
        let mut csv = String::from("age,sex,y\n");
        for i in 0..100 {
            csv.push_str(&format!(
                "7,{},{}\n",
                if i % 2 == 0 { "f" } else { "m" },
                i % 2
            ));
        }
        let ds = read(&csv).unwrap();
        // population std of a constant column, computed directly
        let values: Vec<f64> = ds.rows().iter().map(|r| r[0]).collect();
        let mean = values.iter().sum::<f64>() / 100.0;
        let direct = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert_eq!(direct, 0.0);
        assert_eq!(ds.schema()[0].sigma, 0.0);
        assert_eq!(ds.normalization()[0].std, 1.0);
        let z = ds.normalize(&Instance::new(vec![7.0, 0.0])).unwrap();
        assert_eq!(z.values[0], 0.0);
    }

    #[test]
    fn normalize_centers_and_round_trips() {
        let ds = read("age,sex,y\n20,f,0\n40,m,1\n60,f,1\n").unwrap();
        let x = Instance::new(vec![40.0, 1.0]);
        let z = ds.normalize(&x).unwrap();
        assert_eq!(z.values[0], 0.0);
        assert_eq!(z.values[1], 1.0);
        let back = ds.denormalize(&z).unwrap();
        assert!((back.values[0] - 40.0).abs() < 1e-9);
        assert!(ds.normalize(&Instance::new(vec![1.0])).is_err());
    }

    #[test]
    fn one_hot_definition() {
        assert_eq!(one_hot(1, 3), vec![0.0, 1.0, 0.0]);
        let schema = vec![FeatureSchema::categorical("c", ["a", "b", "c"])];
        let ds = Dataset::new(schema, vec![vec![0.0], vec![1.0], vec![2.0]], None).unwrap();
        assert_eq!(ds.encoder().encode(&[1.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let schema = vec![FeatureSchema::numeric("a")];
        let rows = (0..10).map(|i| vec![i as f64]).collect();
        let ds = Dataset::new(schema, rows, None).unwrap();
        let (train, test) = ds.split(0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let (train2, test2) = ds.split(0.8, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        // disjoint and exhaustive, checked through row-id sets
        let mut all: Vec<usize> = train
            .row_ids()
            .iter()
            .chain(test.row_ids())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(test.normalization(), train.normalization());
        assert!(ds.split(0.0, 1).is_err());
        assert!(ds.split(0.01, 1).is_err());
    }

    #[test]
    fn mutability_allows() {
        let inc = Mutability::SemiImmutable {
            direction: Direction::IncreaseOnly,
        };
        assert!(inc.allows(1.0, 2.0));
        assert!(!inc.allows(2.0, 1.0));
        assert!(!Mutability::Immutable.allows(1.0, 1.5));
        assert!(Mutability::Immutable.allows(1.0, 1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn denormalize_inverts_normalize(
                rows in prop::collection::vec((-1e3f64..1e3, 0usize..3), 2..30),
                probe in -1e4f64..1e4,
                cat in 0usize..3,
            ) {
                let schema = vec![
                    FeatureSchema::numeric("a"),
                    FeatureSchema::categorical("c", ["x", "y", "z"]),
                ];
                let rows = rows.into_iter().map(|(a, c)| vec![a, c as f64]).collect();
                let ds = Dataset::new(schema, rows, None).unwrap();
                let x = Instance::new(vec![probe, cat as f64]);
                let back = ds.denormalize(&ds.normalize(&x).unwrap()).unwrap();
                prop_assert!((back.values[0] - probe).abs() <= 1e-9 * probe.abs().max(1.0));
                prop_assert_eq!(back.values[1], cat as f64);
            }
        }
    }
}
