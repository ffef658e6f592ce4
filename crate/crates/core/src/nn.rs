//! Minimal dense-network building blocks shared by the MLP classifier and the
//! VAE: affine layers, batch normalization, ReLU, inverted dropout, and the
//! RMSProp / Adam update rules. Everything is batch-major (`rows = samples`).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything holding trainable parameters, visited in a fixed order.
pub(crate) trait Params {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));
}

pub(crate) fn flatten<P: Params + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |s| out.extend_from_slice(s));
    out
}

pub(crate) fn unflatten<P: Params + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut(&mut |s| {
        s.copy_from_slice(&flat[offset..offset + s.len()]);
        offset += s.len();
    });
    debug_assert_eq!(offset, flat.len());
}

pub(crate) fn zero<P: Params + ?Sized>(p: &mut P) {
    p.visit_mut(&mut |s| s.fill(0.0));
}

impl<T: Params> Params for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.iter().for_each(|p| p.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }
}

/// Affine layer `y = x W + b` with `W` of shape (inputs, outputs).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// He-normal initialization.
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("finite std");
        Dense {
            w: Array2::from_shape_fn((inputs, outputs), |_| normal.sample(rng)),
            b: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &Array2<f64>, g: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &x.t().dot(g);
        grad.b += &g.sum_axis(Axis(0));
        g.dot(&self.w.t())
    }

    pub fn to_doc(&self, activation: &str) -> DenseDoc {
        DenseDoc {
            inputs: self.inputs(),
            outputs: self.outputs(),
            activation: activation.to_string(),
            weights: self.w.iter().copied().collect(),
            bias: self.b.to_vec(),
        }
    }

    pub fn from_doc(doc: &DenseDoc) -> Result<Self> {
        let w = Array2::from_shape_vec((doc.inputs, doc.outputs), doc.weights.clone())
            .map_err(|e| Error::Format(format!("dense weights: {e}")))?;
        if doc.bias.len() != doc.outputs {
            return Err(Error::Format(format!(
                "dense bias has {} entries, expected {}",
                doc.bias.len(),
                doc.outputs
            )));
        }
        Ok(Dense {
            w,
            b: Array1::from(doc.bias.clone()),
        })
    }
}

impl Params for Dense {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice().expect("standard layout"));
        f(self.b.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_slice_mut().expect("standard layout"));
        f(self.b.as_slice_mut().expect("standard layout"));
    }
}

/// Serialized affine layer; `weights` is the (inputs × outputs) matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseDoc {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: String,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

pub(crate) struct BatchNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }

    pub fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = centered * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                mean,
                var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache,
        g: &Array2<f64>,
        grad: &mut BatchNorm,
    ) -> Array2<f64> {
        let n = g.nrows() as f64;
        grad.gamma += &(g * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &g.sum_axis(Axis(0));
        let dxhat = g * &self.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        (dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &cache.inv_std / n
    }

    pub fn update_running(&mut self, cache: &BatchNormCache, batch: usize) {
        // unbiased variance for the running estimate
        let unbias = if batch > 1 {
            batch as f64 / (batch as f64 - 1.0)
        } else {
            1.0
        };
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &cache.mean * BN_MOMENTUM;
        self.running_var =
            &self.running_var * (1.0 - BN_MOMENTUM) + &cache.var * (BN_MOMENTUM * unbias);
    }
}

impl Params for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.gamma.as_slice().expect("standard layout"));
        f(self.beta.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.gamma.as_slice_mut().expect("standard layout"));
        f(self.beta.as_slice_mut().expect("standard layout"));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormDoc {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn to_doc(&self) -> BatchNormDoc {
        BatchNormDoc {
            gamma: self.gamma.to_vec(),
            beta: self.beta.to_vec(),
            running_mean: self.running_mean.to_vec(),
            running_var: self.running_var.to_vec(),
        }
    }

    pub fn from_doc(doc: &BatchNormDoc, dim: usize) -> Result<Self> {
        let parts = [&doc.gamma, &doc.beta, &doc.running_mean, &doc.running_var];
        if parts.iter().any(|p| p.len() != dim) {
            return Err(Error::Format(format!(
                "batch-norm arrays must have length {dim}"
            )));
        }
        Ok(BatchNorm {
            gamma: Array1::from(doc.gamma.clone()),
            beta: Array1::from(doc.beta.clone()),
            running_mean: Array1::from(doc.running_mean.clone()),
            running_var: Array1::from(doc.running_var.clone()),
        })
    }
}

/// Affine layer followed by optional batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HiddenLayer {
    pub dense: Dense,
    pub norm: Option<BatchNorm>,
}

impl Params for HiddenLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.dense.visit(f);
        if let Some(n) = &self.norm {
            n.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.dense.visit_mut(f);
        if let Some(n) = &mut self.norm {
            n.visit_mut(f);
        }
    }
}

pub(crate) fn hidden_stack(
    inputs: usize,
    sizes: &[usize],
    batch_norm: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<HiddenLayer> {
    let mut width = inputs;
    sizes
        .iter()
        .map(|&size| {
            let layer = HiddenLayer {
                dense: Dense::new(width, size, rng),
                norm: batch_norm.then(|| BatchNorm::new(size)),
            };
            width = size;
            layer
        })
        .collect()
}

pub(crate) enum Mode<'a> {
    /// Batch statistics and random dropout masks.
    Train {
        dropout: f64,
        rng: &'a mut ChaCha8Rng,
    },
    /// Batch statistics, dropout disabled. Used for gradient checks.
    TrainNoDropout,
    /// Running statistics, dropout disabled.
    Eval,
}

impl Mode<'_> {
    fn batch_stats(&self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

pub(crate) struct LayerCache {
    input: Array2<f64>,
    norm: Option<BatchNormCache>,
    pre_activation: Array2<f64>,
    mask: Option<Array2<f64>>,
}

pub(crate) fn forward_stack(
    layers: &[HiddenLayer],
    x: &Array2<f64>,
    mode: &mut Mode<'_>,
) -> (Array2<f64>, Vec<LayerCache>) {
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let input = h;
        let mut z = layer.dense.forward(&input);
        let mut norm_cache = None;
        if let Some(norm) = &layer.norm {
            if mode.batch_stats() {
                let (y, cache) = norm.forward_train(&z);
                z = y;
                norm_cache = Some(cache);
            } else {
                z = norm.forward_eval(&z);
            }
        }
        let mut a = z.mapv(|v| v.max(0.0));
        let mut mask = None;
        if let Mode::Train { dropout, rng } = mode {
            if *dropout > 0.0 {
                let keep = 1.0 - *dropout;
                let m = Array2::from_shape_fn(a.raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                a *= &m;
                mask = Some(m);
            }
        }
        caches.push(LayerCache {
            input,
            norm: norm_cache,
            pre_activation: z,
            mask,
        });
        h = a;
    }
    (h, caches)
}

pub(crate) fn backward_stack(
    layers: &[HiddenLayer],
    caches: &[LayerCache],
    g: Array2<f64>,
    grads: &mut [HiddenLayer],
) -> Array2<f64> {
    let mut g = g;
    for ((layer, cache), grad) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        if let Some(mask) = &cache.mask {
            g *= mask;
        }
        g.zip_mut_with(&cache.pre_activation, |gv, &z| {
            if z <= 0.0 {
                *gv = 0.0;
            }
        });
        if let (Some(norm), Some(nc), Some(gn)) = (&layer.norm, &cache.norm, grad.norm.as_mut()) {
            g = norm.backward(nc, &g, gn);
        }
        g = layer.dense.backward(&cache.input, &g, &mut grad.dense);
    }
    g
}

pub(crate) fn update_running_stats(
    layers: &mut [HiddenLayer],
    caches: &[LayerCache],
    batch: usize,
) {
    for (layer, cache) in layers.iter_mut().zip(caches) {
        if let (Some(norm), Some(nc)) = (layer.norm.as_mut(), &cache.norm) {
            norm.update_running(nc, batch);
        }
    }
}

/// Row-wise softmax.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Splits `0..n` into shuffled mini-batches of at least two rows (a trailing
/// single row is folded into the previous batch so batch statistics exist).
pub(crate) fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(2))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

pub(crate) fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

#[derive(Debug, Clone)]
pub(crate) struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    cache: Vec<f64>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64, n: usize) -> Self {
        RmsProp {
            learning_rate,
            decay,
            epsilon,
            cache: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for ((p, &g), c) in params.iter_mut().zip(grads).zip(&mut self.cache) {
            *c = self.decay * *c + (1.0 - self.decay) * g * g;
            *p -= self.learning_rate * g / (c.sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Adam {
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(learning_rate: f64, n: usize) -> Self {
        Adam {
            learning_rate,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = ndarray::array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stack = hidden_stack(3, &[4, 2], true, &mut rng);
        let flat = flatten(&stack);
        assert_eq!(flat.len(), 3 * 4 + 4 + 4 + 4 + 4 * 2 + 2 + 2 + 2);
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        unflatten(&mut stack, &doubled);
        assert_eq!(flatten(&stack), doubled);
    }

    #[test]
    fn minibatches_cover_all_rows_without_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = minibatches(9, 4, &mut rng);
        assert!(batches.iter().all(|b| b.len() >= 2));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }
}
