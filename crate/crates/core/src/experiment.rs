//! Shared setup for benchmarks: split data, train a reference black box and
//! a VAE, and pick balanced anchors.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::blackbox::{train_logistic, train_mlp, LogisticConfig, MlpConfig, ReferenceModel};
use crate::dataset::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::latent::{train_vae, VaeConfig, VaeModel};
use crate::metrics::select_anchors;
use crate::recourse::Explainer;
use crate::synthetic::{self, SyntheticKind};

/// Rows generated for a synthetic benchmark, enough for `k = 1000` after the split.
pub const SYNTHETIC_ROWS: usize = 3000;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" | "lr" => Ok(ModelKind::Logistic),
            "mlp" | "ann" => Ok(ModelKind::Mlp),
            other => Err(Error::InvalidArgument(format!(
                "unknown model kind '{other}' (expected logistic or mlp)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp => "mlp",
        })
    }
}

pub fn train_model(kind: ModelKind, train: &Dataset, seed: u64) -> Result<ReferenceModel> {
    Ok(match kind {
        ModelKind::Logistic => ReferenceModel::Logistic(
            train_logistic(
                train,
                &LogisticConfig {
                    seed,
                    ..LogisticConfig::default()
                },
            )?
            .0,
        ),
        ModelKind::Mlp => ReferenceModel::Mlp(
            train_mlp(
                train,
                &MlpConfig {
                    seed,
                    ..MlpConfig::default()
                },
            )?
            .0,
        ),
    })
}

/// Everything a benchmark run needs, all derived from one seed.
pub struct Setup {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
    pub model: Arc<ReferenceModel>,
    pub vae: Arc<VaeModel>,
    pub explainer: Explainer,
}

impl Setup {
    /// Splits `data`, trains the black box and the VAE on the training part and
    /// indexes the training part as the neighbor pool.
    pub fn from_dataset(
        data: &Dataset,
        model_kind: ModelKind,
        vae_config: Option<VaeConfig>,
        seed: u64,
    ) -> Result<Setup> {
        let (train, test) = data.split(TRAIN_FRACTION, seed)?;
        let model = train_model(model_kind, &train, seed)?;
        let mut vae_config =
            vae_config.unwrap_or_else(|| VaeConfig::for_width(train.encoder().width()));
        vae_config.seed = seed;
        let (vae, _) = train_vae(&train, &vae_config)?;
        Self::assemble(train, test, model, vae)
    }

    pub fn synthetic(kind: SyntheticKind, model_kind: ModelKind, seed: u64) -> Result<Setup> {
        let data = synthetic::generate(kind, SYNTHETIC_ROWS, seed)?;
        Self::from_dataset(&data, model_kind, None, seed)
    }

    pub fn assemble(
        train: Dataset,
        test: Dataset,
        model: ReferenceModel,
        vae: VaeModel,
    ) -> Result<Setup> {
        let train = Arc::new(train);
        let model = Arc::new(model);
        let vae = Arc::new(vae);
        let explainer = Explainer::new(model.clone(), train.clone(), vae.clone())?;
        Ok(Setup {
            train,
            test: Arc::new(test),
            model,
            vae,
            explainer,
        })
    }

    /// `n` anchors from the test split, balanced by predicted label.
    pub fn anchors(&self, n: usize, seed: u64) -> Result<Vec<Instance>> {
        select_anchors(&self.test, self.model.as_ref(), n, seed)
    }
}
