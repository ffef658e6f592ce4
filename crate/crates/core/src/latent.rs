//! Gaussian VAE over encoded instances, used as the proximity measure for
//! neighborhood sampling and for the latent-distance metric.
//!
//! Encoder and decoder are dense stacks (affine, batch norm, ReLU, dropout).
//! Numeric slots use a unit-variance Gaussian likelihood; one-hot categorical
//! slots use a Bernoulli likelihood unless `bernoulli_categorical` is off.
//! The trained model embeds an instance as its posterior mean.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureEncoder, Instance};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, BatchNorm, BatchNormDoc, Dense, DenseDoc, HiddenLayer, Mode, Params};

/// Architecture presets keyed on the encoded input width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VaePreset {
    /// width < 15: one hidden layer of 16, latent 7
    Narrow,
    /// 15 <= width < 25: one hidden layer of 25, latent 8
    Medium,
    /// width >= 25: hidden layers 25 and 16, latent 12
    Wide,
    /// pixel inputs: hidden layers 500 and 250, latent 32
    Image,
    Custom,
}

impl VaePreset {
    pub fn for_width(width: usize) -> Self {
        match width {
            0..=14 => VaePreset::Narrow,
            15..=24 => VaePreset::Medium,
            _ => VaePreset::Wide,
        }
    }

    pub fn hidden_sizes(self) -> Vec<usize> {
        match self {
            VaePreset::Narrow => vec![16],
            VaePreset::Medium => vec![25],
            VaePreset::Wide => vec![25, 16],
            VaePreset::Image => vec![500, 250],
            VaePreset::Custom => Vec::new(),
        }
    }

    pub fn latent_dim(self) -> usize {
        match self {
            VaePreset::Narrow => 7,
            VaePreset::Medium => 8,
            VaePreset::Wide => 12,
            VaePreset::Image => 32,
            VaePreset::Custom => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub preset: VaePreset,
    pub hidden_sizes: Vec<usize>,
    pub latent_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub kl_weight: f64,
    pub batch_size: usize,
    pub batch_norm: bool,
    pub bernoulli_categorical: bool,
    pub seed: u64,
}

impl VaeConfig {
    /// Preset architecture for an encoded input width. For very narrow inputs
    /// the latent size is capped at `width - 1` so the bottleneck stays
    /// smaller than the input.
    pub fn for_width(width: usize) -> Self {
        Self::from_preset(VaePreset::for_width(width), width)
    }

    pub fn for_images(width: usize) -> Self {
        Self::from_preset(VaePreset::Image, width)
    }

    fn from_preset(preset: VaePreset, width: usize) -> Self {
        VaeConfig {
            preset,
            hidden_sizes: preset.hidden_sizes(),
            latent_dim: preset.latent_dim().min(width.saturating_sub(1)).max(1),
            epochs: 10,
            learning_rate: 0.001,
            dropout_rate: 0.2,
            kl_weight: 2.5e-4,
            batch_size: 64,
            batch_norm: true,
            bernoulli_categorical: true,
            seed: 0,
        }
    }
}

/// KL divergence of N(mu, exp(log_var)) from N(0, 1), one dimension.
pub fn kl_standard_normal(mu: f64, log_var: f64) -> f64 {
    0.5 * (mu * mu + log_var.exp() - log_var - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
struct VaeParams {
    enc_hidden: Vec<HiddenLayer>,
    enc_mu: Dense,
    enc_log_var: Dense,
    dec_hidden: Vec<HiddenLayer>,
    dec_out: Dense,
}

impl Params for VaeParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.enc_hidden.visit(f);
        self.enc_mu.visit(f);
        self.enc_log_var.visit(f);
        self.dec_hidden.visit(f);
        self.dec_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.enc_hidden.visit_mut(f);
        self.enc_mu.visit_mut(f);
        self.enc_log_var.visit_mut(f);
        self.dec_hidden.visit_mut(f);
        self.dec_out.visit_mut(f);
    }
}

struct StepOutput {
    loss: f64,
    grad: VaeParams,
    enc_caches: Vec<nn::LayerCache>,
    dec_caches: Vec<nn::LayerCache>,
}

impl VaeParams {
    fn encode_mean(&self, x: &Array2<f64>) -> Array2<f64> {
        let (h, _) = nn::forward_stack(&self.enc_hidden, x, &mut Mode::Eval);
        self.enc_mu.forward(&h)
    }

    /// Negative ELBO averaged over the batch, with its gradient.
    fn step(
        &self,
        x: &Array2<f64>,
        noise: &Array2<f64>,
        bernoulli: &[bool],
        kl_weight: f64,
        mode: &mut Mode<'_>,
    ) -> StepOutput {
        let n = x.nrows() as f64;
        let (h, enc_caches) = nn::forward_stack(&self.enc_hidden, x, mode);
        let mu = self.enc_mu.forward(&h);
        let log_var = self.enc_log_var.forward(&h);
        let std = log_var.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * noise);
        let (hd, dec_caches) = nn::forward_stack(&self.dec_hidden, &z, mode);
        let out = self.dec_out.forward(&hd);

        let mut recon = 0.0;
        let mut d_out = Array2::zeros(out.raw_dim());
        for ((i, j), &o) in out.indexed_iter() {
            let t = x[[i, j]];
            if bernoulli[j] {
                // softplus(o) - t*o, computed stably
                recon += o.max(0.0) + (-o.abs()).exp().ln_1p() - t * o;
                d_out[[i, j]] = (1.0 / (1.0 + (-o).exp()) - t) / n;
            } else {
                recon += 0.5 * (o - t) * (o - t);
                d_out[[i, j]] = (o - t) / n;
            }
        }
        let kl: f64 = mu
            .iter()
            .zip(log_var.iter())
            .map(|(&m, &lv)| kl_standard_normal(m, lv))
            .sum();
        let loss = (recon + kl_weight * kl) / n;

        let mut grad = self.clone();
        nn::zero(&mut grad);
        let d_hd = self.dec_out.backward(&hd, &d_out, &mut grad.dec_out);
        let d_z = nn::backward_stack(&self.dec_hidden, &dec_caches, d_hd, &mut grad.dec_hidden);
        let d_mu = &d_z + &(&mu * (kl_weight / n));
        let d_log_var =
            &d_z * noise * &std * 0.5 + log_var.mapv(|v| kl_weight * 0.5 * (v.exp() - 1.0) / n);
        let d_h = self.enc_mu.backward(&h, &d_mu, &mut grad.enc_mu)
            + self
                .enc_log_var
                .backward(&h, &d_log_var, &mut grad.enc_log_var);
        nn::backward_stack(&self.enc_hidden, &enc_caches, d_h, &mut grad.enc_hidden);
        StepOutput {
            loss,
            grad,
            enc_caches,
            dec_caches,
        }
    }
}

/// A trained variational autoencoder over a fixed feature encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    features: FeatureEncoder,
    params: VaeParams,
    bernoulli: Vec<bool>,
    config: VaeConfig,
}

/// Latent embedding of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoint {
    pub z: Vec<f64>,
}

impl LatentPoint {
    pub fn distance(&self, other: &LatentPoint) -> f64 {
        euclidean(&self.z, &other.z)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn slot_likelihoods(features: &FeatureEncoder, bernoulli_categorical: bool) -> Vec<bool> {
    let mut out = vec![false; features.width()];
    if bernoulli_categorical {
        for block in features.blocks().iter().filter(|b| b.categorical) {
            out[block.offset..block.offset + block.width].fill(true);
        }
    }
    out
}

impl VaeModel {
    /// Untrained model with freshly initialized parameters.
    pub fn new(features: FeatureEncoder, config: VaeConfig) -> Result<Self> {
        let width = features.width();
        if config.latent_dim == 0 || config.latent_dim >= width {
            return Err(Error::InvalidArgument(format!(
                "latent_dim {} must be in 1..{width} (input width)",
                config.latent_dim
            )));
        }
        if config.kl_weight.is_nan() || config.kl_weight <= 0.0 {
            return Err(Error::InvalidArgument("kl_weight must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return Err(Error::InvalidArgument(
                "dropout_rate must lie in [0, 1)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc_hidden = nn::hidden_stack(width, &config.hidden_sizes, config.batch_norm, &mut rng);
        let enc_last = config.hidden_sizes.last().copied().unwrap_or(width);
        let enc_mu = Dense::new(enc_last, config.latent_dim, &mut rng);
        let mut enc_log_var = Dense::new(enc_last, config.latent_dim, &mut rng);
        enc_log_var.w.mapv_inplace(|w| w * 0.1);
        let dec_sizes: Vec<usize> = config.hidden_sizes.iter().rev().copied().collect();
        let dec_hidden =
            nn::hidden_stack(config.latent_dim, &dec_sizes, config.batch_norm, &mut rng);
        let dec_last = dec_sizes.last().copied().unwrap_or(config.latent_dim);
        let dec_out = Dense::new(dec_last, width, &mut rng);
        let bernoulli = slot_likelihoods(&features, config.bernoulli_categorical);
        Ok(VaeModel {
            features,
            params: VaeParams {
                enc_hidden,
                enc_mu,
                enc_log_var,
                dec_hidden,
                dec_out,
            },
            bernoulli,
            config,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn feature_encoder(&self) -> &FeatureEncoder {
        &self.features
    }

    pub fn input_width(&self) -> usize {
        self.features.width()
    }

    pub fn params(&self) -> Vec<f64> {
        nn::flatten(&self.params)
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        nn::unflatten(&mut self.params, flat);
    }

    /// Negative ELBO on encoded rows for a fixed reparameterization draw
    /// `noise` (one row of `latent_dim` standard-normal values per input row),
    /// using batch statistics and no dropout, with its parameter gradient.
    pub fn loss_and_grad(
        &self,
        encoded: &[Vec<f64>],
        noise: &[Vec<f64>],
    ) -> Result<(f64, Vec<f64>)> {
        let x = rows_to_matrix(encoded, self.input_width())?;
        let eps = rows_to_matrix(noise, self.latent_dim())?;
        if eps.nrows() != x.nrows() {
            return Err(Error::Dimension {
                expected: x.nrows(),
                got: eps.nrows(),
            });
        }
        let out = self.params.step(
            &x,
            &eps,
            &self.bernoulli,
            self.config.kl_weight,
            &mut Mode::TrainNoDropout,
        );
        Ok((out.loss, nn::flatten(&out.grad)))
    }

    /// Posterior mean of one instance.
    pub fn encode(&self, x: &Instance) -> Result<LatentPoint> {
        self.encode_values(&x.values)
    }

    pub fn encode_values(&self, values: &[f64]) -> Result<LatentPoint> {
        let enc = self.features.encode(values)?;
        let x = Array2::from_shape_vec((1, enc.len()), enc)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(LatentPoint {
            z: self.params.encode_mean(&x).row(0).to_vec(),
        })
    }

    pub fn encode_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<LatentPoint>> {
        let width = self.input_width();
        let mut flat = Vec::with_capacity(rows.len() * width);
        for r in rows {
            self.features.encode_into(r, &mut flat)?;
        }
        let x = Array2::from_shape_vec((rows.len(), width), flat)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(self
            .params
            .encode_mean(&x)
            .rows()
            .into_iter()
            .map(|r| LatentPoint { z: r.to_vec() })
            .collect())
    }

    /// Euclidean distance between the posterior means of `a` and `b`.
    pub fn latent_distance(&self, a: &Instance, b: &Instance) -> Result<f64> {
        Ok(self.encode(a)?.distance(&self.encode(b)?))
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Dimension {
            expected: width,
            got: bad.len(),
        });
    }
    Array2::from_shape_vec((rows.len(), width), rows.concat())
        .map_err(|e| Error::Format(e.to_string()))
}

/// Trains a VAE by minimizing the negative ELBO with Adam. Returns the model
/// and the mean training loss of each epoch.
pub fn train_vae(train: &Dataset, config: &VaeConfig) -> Result<(VaeModel, Vec<f64>)> {
    let features = train.encoder();
    let mut model = VaeModel::new(features, config.clone())?;
    let width = model.input_width();
    let mut flat = Vec::with_capacity(train.len() * width);
    for r in train.rows() {
        model.features.encode_into(r, &mut flat)?;
    }
    let x = Array2::from_shape_vec((train.len(), width), flat)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut params = nn::flatten(&model.params);
    let mut optimizer = Adam::new(config.learning_rate, params.len());
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for batch in nn::minibatches(x.nrows(), config.batch_size, &mut rng) {
            let xb = x.select(Axis(0), &batch);
            let noise = Array2::from_shape_fn((batch.len(), config.latent_dim), |_| {
                StandardNormal.sample(&mut rng)
            });
            let mut mode = if config.dropout_rate > 0.0 {
                Mode::Train {
                    dropout: config.dropout_rate,
                    rng: &mut rng,
                }
            } else {
                Mode::TrainNoDropout
            };
            let out = model
                .params
                .step(&xb, &noise, &model.bernoulli, config.kl_weight, &mut mode);
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            total += out.loss * batch.len() as f64;
            optimizer.step(&mut params, &nn::flatten(&out.grad));
            nn::unflatten(&mut model.params, &params);
            nn::update_running_stats(&mut model.params.enc_hidden, &out.enc_caches, batch.len());
            nn::update_running_stats(&mut model.params.dec_hidden, &out.dec_caches, batch.len());
        }
        losses.push(total / x.nrows() as f64);
    }
    Ok((model, losses))
}

pub const VAE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub dense: DenseDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNormDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDoc {
    pub hidden: Vec<LayerDoc>,
    pub mu: DenseDoc,
    pub log_var: DenseDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderDoc {
    pub hidden: Vec<LayerDoc>,
    pub output: DenseDoc,
}

/// On-disk form of a [`VaeModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeDocument {
    pub format_version: u32,
    pub kind: String,
    pub preset: VaePreset,
    pub config: VaeConfig,
    pub features: FeatureEncoder,
    pub encoder: EncoderDoc,
    pub decoder: DecoderDoc,
}

fn layers_to_doc(layers: &[HiddenLayer]) -> Vec<LayerDoc> {
    layers
        .iter()
        .map(|l| LayerDoc {
            dense: l.dense.to_doc("relu"),
            batch_norm: l.norm.as_ref().map(BatchNorm::to_doc),
        })
        .collect()
}

fn layers_from_doc(docs: &[LayerDoc]) -> Result<Vec<HiddenLayer>> {
    docs.iter()
        .map(|d| {
            let dense = Dense::from_doc(&d.dense)?;
            let norm = d
                .batch_norm
                .as_ref()
                .map(|b| BatchNorm::from_doc(b, dense.outputs()))
                .transpose()?;
            Ok(HiddenLayer { dense, norm })
        })
        .collect()
}

impl VaeModel {
    pub fn to_document(&self) -> VaeDocument {
        VaeDocument {
            format_version: VAE_FORMAT_VERSION,
            kind: "vae".into(),
            preset: self.config.preset,
            config: self.config.clone(),
            features: self.features.clone(),
            encoder: EncoderDoc {
                hidden: layers_to_doc(&self.params.enc_hidden),
                mu: self.params.enc_mu.to_doc("linear"),
                log_var: self.params.enc_log_var.to_doc("linear"),
            },
            decoder: DecoderDoc {
                hidden: layers_to_doc(&self.params.dec_hidden),
                output: self.params.dec_out.to_doc("linear"),
            },
        }
    }

    pub fn from_document(doc: &VaeDocument) -> Result<Self> {
        if doc.format_version != VAE_FORMAT_VERSION || doc.kind != "vae" {
            return Err(Error::Format(format!(
                "unsupported VAE document (kind '{}', version {})",
                doc.kind, doc.format_version
            )));
        }
        let params = VaeParams {
            enc_hidden: layers_from_doc(&doc.encoder.hidden)?,
            enc_mu: Dense::from_doc(&doc.encoder.mu)?,
            enc_log_var: Dense::from_doc(&doc.encoder.log_var)?,
            dec_hidden: layers_from_doc(&doc.decoder.hidden)?,
            dec_out: Dense::from_doc(&doc.decoder.output)?,
        };
        let width = doc.features.width();
        let latent = doc.config.latent_dim;
        let enc_in = params
            .enc_hidden
            .first()
            .map_or(params.enc_mu.inputs(), |l| l.dense.inputs());
        let dec_in = params
            .dec_hidden
            .first()
            .map_or(params.dec_out.inputs(), |l| l.dense.inputs());
        if enc_in != width
            || params.enc_mu.outputs() != latent
            || params.enc_log_var.outputs() != latent
            || dec_in != latent
            || params.dec_out.outputs() != width
        {
            return Err(Error::Format("VAE layer shapes are inconsistent".into()));
        }
        Ok(VaeModel {
            bernoulli: slot_likelihoods(&doc.features, doc.config.bernoulli_categorical),
            features: doc.features.clone(),
            params,
            config: doc.config.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(&self.to_document())?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(&serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureSchema;
    use rand::Rng;

    fn toy(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let schema = vec![
            FeatureSchema::numeric("a"),
            FeatureSchema::numeric("b"),
            FeatureSchema::numeric("c"),
            FeatureSchema::categorical("d", ["x", "y", "z"]),
        ];
        let rows = (0..n)
            .map(|_| {
                let t: f64 = rng.random_range(-2.0..2.0);
                vec![
                    t,
                    2.0 * t + rng.random_range(-0.1..0.1),
                    -t,
                    rng.random_range(0..3) as f64,
                ]
            })
            .collect();
        Dataset::new(schema, rows, None).unwrap()
    }

    #[test]
    fn presets_follow_width_rule() {
        assert_eq!(VaePreset::for_width(10), VaePreset::Narrow);
        assert_eq!(VaePreset::for_width(15), VaePreset::Medium);
        assert_eq!(VaePreset::for_width(24), VaePreset::Medium);
        assert_eq!(VaePreset::for_width(25), VaePreset::Wide);
        let c = VaeConfig::for_width(20);
        assert_eq!((c.hidden_sizes.as_slice(), c.latent_dim), (&[25][..], 8));
        let c = VaeConfig::for_width(30);
        assert_eq!(
            (c.hidden_sizes.as_slice(), c.latent_dim),
            (&[25, 16][..], 12)
        );
        let c = VaeConfig::for_width(12);
        assert_eq!((c.hidden_sizes.as_slice(), c.latent_dim), (&[16][..], 7));
        let c = VaeConfig::for_images(64);
        assert_eq!(
            (c.hidden_sizes.as_slice(), c.latent_dim),
            (&[500, 250][..], 32)
        );
        assert_eq!(VaeConfig::for_width(4).latent_dim, 3);
        assert_eq!(
            (c.epochs, c.learning_rate, c.dropout_rate, c.kl_weight),
            (10, 0.001, 0.2, 2.5e-4)
        );
    }

    #[test]
    fn kl_vanishes_at_prior_and_is_nonnegative() {
        assert_eq!(kl_standard_normal(0.0, 0.0), 0.0);
        for &(m, lv) in &[(1.0, 0.0), (0.0, 2.0), (-3.0, -4.0), (0.5, 0.1)] {
            assert!(kl_standard_normal(m, lv) >= 0.0);
        }
    }

    #[test]
    fn latent_dim_must_be_below_width() {
        let ds = toy(10);
        let mut config = VaeConfig::for_width(6);
        config.latent_dim = 6;
        assert!(VaeModel::new(ds.encoder(), config).is_err());
    }

    #[test]
    fn training_reduces_loss_and_encode_is_deterministic() {
        let ds = toy(400);
        let mut config = VaeConfig::for_width(6);
        config.epochs = 30;
        config.learning_rate = 0.005;
        let (vae, losses) = train_vae(&ds, &config).unwrap();
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
        let x = ds.instance(0);
        let a = vae.encode(&x).unwrap();
        assert_eq!(a, vae.encode(&x).unwrap());
        assert_eq!(a.z.len(), vae.latent_dim());
        assert_eq!(vae.latent_distance(&x, &x).unwrap(), 0.0);
        let dup = Instance::new(x.values.clone());
        assert_eq!(vae.encode(&dup).unwrap(), a);
    }

    #[test]
    fn document_round_trip() {
        let ds = toy(50);
        let (vae, _) = train_vae(&ds, &VaeConfig::for_width(6)).unwrap();
        let back = VaeModel::from_document(&vae.to_document()).unwrap();
        assert_eq!(back, vae);
    }
}
