//! The classifier interface explained by this crate, plus reference models.
//!
//! A [`BlackBox`] receives raw instance values (categorical values as category
//! indices) and returns a probability vector. The reference models carry their
//! own [`FeatureEncoder`] so they can be saved and reloaded independently of
//! the dataset they were trained on.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureEncoder, Instance};
use crate::error::{Error, Result};
use crate::nn::{self, Dense, DenseDoc, HiddenLayer, Mode, Params, RmsProp};

/// Tolerance for probability vectors summing to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// A classifier `f` queried only through its output probabilities.
pub trait BlackBox: Send + Sync {
    fn class_count(&self) -> usize;

    /// Probabilities over the classes for one instance given as raw values.
    fn predict_proba(&self, values: &[f64]) -> Result<Vec<f64>>;

    fn predict_proba_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|r| self.predict_proba(r)).collect()
    }

    fn description(&self) -> String {
        "black box".into()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and probability vector.
pub fn predict(model: &dyn BlackBox, x: &Instance) -> Result<(usize, Vec<f64>)> {
    let p = model.predict_proba(&x.values)?;
    Ok((argmax(&p), p))
}

pub fn predict_label(model: &dyn BlackBox, values: &[f64]) -> Result<usize> {
    model.predict_proba(values).map(|p| argmax(&p))
}

pub fn predict_labels(model: &dyn BlackBox, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
    Ok(model
        .predict_proba_batch(rows)?
        .iter()
        .map(|p| argmax(p))
        .collect())
}

/// Fraction of labeled rows the model predicts correctly.
pub fn accuracy(model: &dyn BlackBox, data: &Dataset) -> Result<f64> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))?;
    let predicted = predict_labels(model, data.rows())?;
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn training_matrix(train: &Dataset) -> Result<(FeatureEncoder, Array2<f64>, Vec<usize>, usize)> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::InvalidArgument("training set has no labels".into()))?
        .to_vec();
    let classes = train.class_count();
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::SingleClass);
    }
    let encoder = train.encoder();
    let x = encode_rows(&encoder, train.rows())?;
    Ok((encoder, x, labels, classes.max(2)))
}

fn encode_rows(encoder: &FeatureEncoder, rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = encoder.width();
    let mut flat = Vec::with_capacity(rows.len() * width);
    for r in rows {
        encoder.encode_into(r, &mut flat)?;
    }
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::Format(e.to_string()))
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Dimension {
            expected: width,
            got: bad.len(),
        });
    }
    Array2::from_shape_vec((rows.len(), width), rows.concat())
        .map_err(|e| Error::Format(e.to_string()))
}

/// Class-weighted mean cross-entropy of softmax(`logits`) and the gradient
/// with respect to the logits.
fn weighted_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
    class_weights: &[f64],
) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = nn::softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let w = class_weights[y];
        loss -= w * grad[[i, y]].max(1e-300).ln();
        grad[[i, y]] -= 1.0;
        grad.row_mut(i).mapv_inplace(|g| g * w / n);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            learning_rate: 0.5,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression trained by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    encoder: FeatureEncoder,
    linear: Dense,
}

impl LogisticModel {
    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub fn params(&self) -> Vec<f64> {
        nn::flatten(&self.linear)
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        nn::unflatten(&mut self.linear, flat);
    }

    /// Unweighted mean cross-entropy and its parameter gradient on encoded rows.
    pub fn loss_and_grad(&self, encoded: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let x = to_matrix(encoded)?;
        let weights = vec![1.0; self.linear.outputs()];
        let (loss, g) = weighted_cross_entropy(&self.linear.forward(&x), labels, &weights);
        let mut grad = self.linear.clone();
        nn::zero(&mut grad);
        self.linear.backward(&x, &g, &mut grad);
        Ok((loss, nn::flatten(&grad)))
    }
}

/// Trains a logistic-regression classifier; per-epoch losses are returned for
/// inspection.
pub fn train_logistic(
    train: &Dataset,
    config: &LogisticConfig,
) -> Result<(LogisticModel, Vec<f64>)> {
    let (encoder, x, labels, classes) = training_matrix(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut linear = Dense::new(x.ncols(), classes, &mut rng);
    linear.w.mapv_inplace(|w| w * 0.01);
    let weights = vec![1.0; classes];
    let mut losses = Vec::with_capacity(config.epochs);
    let mut grad = linear.clone();
    for epoch in 0..config.epochs {
        let (loss, g) = weighted_cross_entropy(&linear.forward(&x), &labels, &weights);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        losses.push(loss);
        nn::zero(&mut grad);
        linear.backward(&x, &g, &mut grad);
        linear.w.scaled_add(-config.learning_rate, &grad.w);
        linear.b.scaled_add(-config.learning_rate, &grad.b);
    }
    Ok((LogisticModel { encoder, linear }, losses))
}

impl BlackBox for LogisticModel {
    fn class_count(&self) -> usize {
        self.linear.outputs()
    }

    fn predict_proba(&self, values: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, self.encoder.width()), self.encoder.encode(values)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(nn::softmax_rows(&self.linear.forward(&x)).row(0).to_vec())
    }

    fn predict_proba_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = encode_rows(&self.encoder, rows)?;
        let p = nn::softmax_rows(&self.linear.forward(&x));
        Ok(p.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    fn description(&self) -> String {
        format!("logistic regression over {} inputs", self.encoder.width())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-class loss weights; `None` derives balanced weights from class frequencies.
    pub class_weights: Option<Vec<f64>>,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_sizes: vec![13, 4],
            learning_rate: 0.005,
            epochs: 60,
            batch_size: 32,
            class_weights: None,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MlpParams {
    hidden: Vec<HiddenLayer>,
    output: Dense,
}

impl Params for MlpParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.hidden.visit(f);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

impl MlpParams {
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (h, _) = nn::forward_stack(&self.hidden, x, &mut Mode::Eval);
        self.output.forward(&h)
    }

    fn loss_and_grad(
        &self,
        x: &Array2<f64>,
        labels: &[usize],
        class_weights: &[f64],
    ) -> (f64, MlpParams) {
        let (h, caches) = nn::forward_stack(&self.hidden, x, &mut Mode::TrainNoDropout);
        let logits = self.output.forward(&h);
        let (loss, g) = weighted_cross_entropy(&logits, labels, class_weights);
        let mut grad = self.clone();
        nn::zero(&mut grad);
        let gh = self.output.backward(&h, &g, &mut grad.output);
        nn::backward_stack(&self.hidden, &caches, gh, &mut grad.hidden);
        (loss, grad)
    }
}

/// ReLU multilayer perceptron with a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    encoder: FeatureEncoder,
    net: MlpParams,
}

impl MlpModel {
    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.encoder.width()];
        sizes.extend(self.net.hidden.iter().map(|l| l.dense.outputs()));
        sizes.push(self.net.output.outputs());
        sizes
    }

    pub fn params(&self) -> Vec<f64> {
        nn::flatten(&self.net)
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        nn::unflatten(&mut self.net, flat);
    }

    /// Class-weighted cross-entropy and its parameter gradient on encoded rows.
    pub fn loss_and_grad(
        &self,
        encoded: &[Vec<f64>],
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let x = to_matrix(encoded)?;
        let (loss, grad) = self.net.loss_and_grad(&x, labels, class_weights);
        Ok((loss, nn::flatten(&grad)))
    }
}

fn balanced_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                labels.len() as f64 / (classes as f64 * c as f64)
            }
        })
        .collect()
}

/// Trains an MLP with class-weighted cross-entropy and RMSProp; per-epoch mean
/// losses are returned.
pub fn train_mlp(train: &Dataset, config: &MlpConfig) -> Result<(MlpModel, Vec<f64>)> {
    let (encoder, x, labels, classes) = training_matrix(train)?;
    let class_weights = match &config.class_weights {
        Some(w) if w.len() == classes => w.clone(),
        Some(w) => {
            return Err(Error::Dimension {
                expected: classes,
                got: w.len(),
            })
        }
        None => balanced_weights(&labels, classes),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hidden = nn::hidden_stack(x.ncols(), &config.hidden_sizes, false, &mut rng);
    let last = config.hidden_sizes.last().copied().unwrap_or(x.ncols());
    let mut net = MlpParams {
        hidden,
        output: Dense::new(last, classes, &mut rng),
    };
    let mut flat = nn::flatten(&net);
    let mut optimizer = RmsProp::new(
        config.learning_rate,
        config.rmsprop_decay,
        config.rmsprop_epsilon,
        flat.len(),
    );
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for batch in nn::minibatches(x.nrows(), config.batch_size, &mut rng) {
            let xb = nn::gather_rows(&x, &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = net.loss_and_grad(&xb, &yb, &class_weights);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            total += loss * batch.len() as f64;
            optimizer.step(&mut flat, &nn::flatten(&grad));
            nn::unflatten(&mut net, &flat);
        }
        losses.push(total / x.nrows() as f64);
    }
    Ok((MlpModel { encoder, net }, losses))
}

impl BlackBox for MlpModel {
    fn class_count(&self) -> usize {
        self.net.output.outputs()
    }

    fn predict_proba(&self, values: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, self.encoder.width()), self.encoder.encode(values)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(nn::softmax_rows(&self.net.forward(&x)).row(0).to_vec())
    }

    fn predict_proba_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = encode_rows(&self.encoder, rows)?;
        let p = nn::softmax_rows(&self.net.forward(&x));
        Ok(p.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    fn description(&self) -> String {
        format!("mlp {:?}", self.layer_sizes())
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk form of a reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    pub kind: String,
    pub classes: usize,
    pub encoder: FeatureEncoder,
    pub layers: Vec<DenseDoc>,
}

/// Either reference model, for saving and loading.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceModel {
    Logistic(LogisticModel),
    Mlp(MlpModel),
}

impl ReferenceModel {
    pub fn to_document(&self) -> ModelDocument {
        match self {
            ReferenceModel::Logistic(m) => ModelDocument {
                format_version: MODEL_FORMAT_VERSION,
                kind: "logistic".into(),
                classes: m.class_count(),
                encoder: m.encoder.clone(),
                layers: vec![m.linear.to_doc("softmax")],
            },
            ReferenceModel::Mlp(m) => {
                let mut layers: Vec<DenseDoc> = m
                    .net
                    .hidden
                    .iter()
                    .map(|l| l.dense.to_doc("relu"))
                    .collect();
                layers.push(m.net.output.to_doc("softmax"));
                ModelDocument {
                    format_version: MODEL_FORMAT_VERSION,
                    kind: "mlp".into(),
                    classes: m.class_count(),
                    encoder: m.encoder.clone(),
                    layers,
                }
            }
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        let dense: Vec<Dense> = doc
            .layers
            .iter()
            .map(Dense::from_doc)
            .collect::<Result<_>>()?;
        let mut width = doc.encoder.width();
        for layer in &dense {
            if layer.inputs() != width {
                return Err(Error::Format(format!(
                    "layer expects {} inputs but receives {width}",
                    layer.inputs()
                )));
            }
            width = layer.outputs();
        }
        if width != doc.classes || doc.classes < 2 {
            return Err(Error::Format(format!(
                "output width {width} does not match {} classes",
                doc.classes
            )));
        }
        let encoder = doc.encoder.clone();
        match doc.kind.as_str() {
            "logistic" if dense.len() == 1 => Ok(ReferenceModel::Logistic(LogisticModel {
                encoder,
                linear: dense.into_iter().next().expect("one layer"),
            })),
            "mlp" if !dense.is_empty() => {
                let mut layers = dense;
                let output = layers.pop().expect("non-empty");
                Ok(ReferenceModel::Mlp(MlpModel {
                    encoder,
                    net: MlpParams {
                        hidden: layers
                            .into_iter()
                            .map(|dense| HiddenLayer { dense, norm: None })
                            .collect(),
                        output,
                    },
                }))
            }
            other => Err(Error::Format(format!(
                "unknown model kind '{other}' with {} layers",
                doc.layers.len()
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_document())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(&serde_json::from_str(&text)?)
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        match self {
            ReferenceModel::Logistic(m) => &m.encoder,
            ReferenceModel::Mlp(m) => &m.encoder,
        }
    }

    fn inner(&self) -> &dyn BlackBox {
        match self {
            ReferenceModel::Logistic(m) => m,
            ReferenceModel::Mlp(m) => m,
        }
    }
}

impl BlackBox for ReferenceModel {
    fn class_count(&self) -> usize {
        self.inner().class_count()
    }
    fn predict_proba(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.inner().predict_proba(values)
    }
    fn predict_proba_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.inner().predict_proba_batch(rows)
    }
    fn description(&self) -> String {
        self.inner().description()
    }
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    instances: &'a [Vec<f64>],
}

#[derive(Deserialize)]
struct PredictResponse {
    probabilities: Vec<Vec<f64>>,
}

/// A classifier served by another process that implements
/// `POST <url> {"instances": [[..]]} -> {"probabilities": [[..]]}`.
pub struct RemoteModel {
    url: String,
    classes: usize,
    agent: ureq::Agent,
}

impl RemoteModel {
    pub fn new(url: impl Into<String>, classes: usize) -> Self {
        RemoteModel {
            url: url.into(),
            classes,
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl BlackBox for RemoteModel {
    fn class_count(&self) -> usize {
        self.classes
    }

    fn predict_proba(&self, values: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.predict_proba_batch(&[values.to_vec()])?;
        Ok(out.pop().expect("one row requested"))
    }

    fn predict_proba_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let response: PredictResponse = self
            .agent
            .post(&self.url)
            .send_json(PredictRequest { instances: rows })
            .map_err(|e| Error::Remote(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Remote(e.to_string()))?;
        if response.probabilities.len() != rows.len() {
            return Err(Error::Remote(format!(
                "asked for {} predictions, received {}",
                rows.len(),
                response.probabilities.len()
            )));
        }
        for p in &response.probabilities {
            let sum: f64 = p.iter().sum();
            if p.len() != self.classes
                || (sum - 1.0).abs() > SIMPLEX_TOLERANCE
                || p.iter().any(|v| !(0.0..=1.0).contains(v))
            {
                return Err(Error::Remote(format!("invalid probability vector {p:?}")));
            }
        }
        Ok(response.probabilities)
    }

    fn description(&self) -> String {
        format!("remote model at {}", self.url)
    }
}
