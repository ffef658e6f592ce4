//! Central finite differences against the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use treecf::blackbox::{train_logistic, train_mlp, LogisticConfig, MlpConfig};
use treecf::dataset::Dataset;
use treecf::latent::{train_vae, VaeConfig};
use treecf::synthetic::{generate, SyntheticKind};

/// Steps tried in order. A smaller one is used only when the stencil of the
/// larger one straddles a ReLU kink.
pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
pub const TOLERANCE: f64 = 1e-4;

/// Smallest derivative the difference quotient can resolve at loss
/// magnitude `loss` and step `step`: a few ulps of the loss over the step.
pub fn resolution(loss: f64, step: f64) -> f64 {
    4.0 * f64::EPSILON * loss.abs().max(1.0) / step
}

/// Relative error with the denominator floored at the level where the
/// finite difference is rounding noise. A component that is zero
/// analytically, such as a bias feeding batch norm, then passes when the
/// numeric value is within that noise.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64, step: f64) -> f64 {
    (analytic - numeric).abs()
        / (analytic.abs() + numeric.abs()).max(resolution(loss, step) / TOLERANCE)
}

/// Central difference of `loss` along coordinate `i`. On a smooth stretch
/// the one-sided slopes differ by about `step` times the curvature; a much
/// larger gap means a kink lies inside the stencil, so the step shrinks.
pub fn central_difference(
    params: &[f64],
    i: usize,
    center: f64,
    loss: &impl Fn(&[f64]) -> f64,
) -> (f64, f64) {
    let mut p = params.to_vec();
    let mut last = (0.0, STEPS[0]);
    for step in STEPS {
        p[i] = params[i] + step;
        let up = loss(&p);
        p[i] = params[i] - step;
        let down = loss(&p);
        last = ((up - down) / (2.0 * step), step);
        let (forward, backward) = ((up - center) / step, (center - down) / step);
        if relative_error(forward, backward, center, step) <= 1e-2 {
            break;
        }
    }
    last
}

/// Largest relative error over `coords` between `analytic` and central
/// differences of `loss` around `params`.
pub fn max_relative_error(
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    loss: impl Fn(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let center = loss(params);
    coords
        .iter()
        .map(|&i| {
            let (numeric, step) = central_difference(params, i, center, &loss);
            relative_error(analytic[i], numeric, center, step)
        })
        .fold(0.0, f64::max)
}

/// Every coordinate when there are at most `cap`, else `cap` sampled ones.
fn coords(n: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        sample(rng, n, cap).into_vec()
    }
}

fn random_point(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, scale).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn batch(data: &Dataset, size: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let encoder = data.encoder();
    let idx = sample(rng, data.len(), size).into_vec();
    let rows = idx
        .iter()
        .map(|&i| encoder.encode(data.row(i)).unwrap())
        .collect();
    let labels = idx.iter().map(|&i| data.labels().unwrap()[i]).collect();
    (rows, labels)
}

fn blobs() -> Dataset {
    generate(SyntheticKind::Blobs, 300, 3).unwrap()
}

pub fn logistic_point(seed: u64) -> f64 {
    let data = blobs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut model, _) = train_logistic(
        &data,
        &LogisticConfig {
            epochs: 1,
            seed,
            ..LogisticConfig::default()
        },
    )
    .unwrap();
    let params = random_point(model.params().len(), 0.7, &mut rng);
    model.set_params(&params);
    let (x, y) = batch(&data, 24, &mut rng);
    let (_, grad) = model.loss_and_grad(&x, &y).unwrap();
    let all = coords(params.len(), usize::MAX, &mut rng);
    max_relative_error(&params, &grad, &all, |p| {
        let mut m = model.clone();
        m.set_params(p);
        m.loss_and_grad(&x, &y).unwrap().0
    })
}

pub fn mlp_point(seed: u64) -> f64 {
    let data = blobs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = MlpConfig {
        epochs: 1,
        seed,
        ..MlpConfig::default()
    };
    let (mut model, _) = train_mlp(&data, &config).unwrap();
    let params = random_point(model.params().len(), 0.7, &mut rng);
    model.set_params(&params);
    let (x, y) = batch(&data, 24, &mut rng);
    let weights = [0.8, 1.3];
    let (_, grad) = model.loss_and_grad(&x, &y, &weights).unwrap();
    let all = coords(params.len(), usize::MAX, &mut rng);
    max_relative_error(&params, &grad, &all, |p| {
        let mut m = model.clone();
        m.set_params(p);
        m.loss_and_grad(&x, &y, &weights).unwrap().0
    })
}

fn vae_point(data: &Dataset, config: VaeConfig, seed: u64, cap: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut vae, _) = train_vae(data, &config).unwrap();
    let base = vae.params();
    // perturb around the trained point so batch-norm scales stay away from zero
    let params: Vec<f64> = base
        .iter()
        .zip(random_point(base.len(), 0.1, &mut rng))
        .map(|(a, b)| a + b)
        .collect();
    vae.set_params(&params);
    let (x, _) = batch(data, 16, &mut rng);
    let noise: Vec<Vec<f64>> = (0..x.len())
        .map(|_| random_point(vae.latent_dim(), 1.0, &mut rng))
        .collect();
    let (_, grad) = vae.loss_and_grad(&x, &noise).unwrap();
    let picked = coords(params.len(), cap, &mut rng);
    max_relative_error(&params, &grad, &picked, |p| {
        let mut v = vae.clone();
        v.set_params(p);
        v.loss_and_grad(&x, &noise).unwrap().0
    })
}

pub fn vae_tabular_point(seed: u64) -> f64 {
    let data = blobs();
    let mut config = VaeConfig::for_width(data.encoder().width());
    config.epochs = 1;
    config.seed = seed;
    vae_point(&data, config, seed, usize::MAX)
}

pub fn vae_image_point(digits: &Dataset, seed: u64) -> f64 {
    let mut config = VaeConfig::for_images(digits.encoder().width());
    config.epochs = 1;
    config.seed = seed;
    vae_point(digits, config, seed, 300)
}
