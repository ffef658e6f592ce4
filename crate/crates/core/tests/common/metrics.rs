//! Brute-force recomputation of the per-counterfactual metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treecf::blackbox::BlackBox;
use treecf::dataset::{Instance, VALUE_TOLERANCE};
use treecf::experiment::Setup;
use treecf::latent::VaeModel;
use treecf::metrics::{
    l0_cost, l2_cost, redundancy, vae_distance, ynn_indexed, MetricsRecord, YNN_K,
};

use super::{euclid, first_argmax};

pub fn label(model: &dyn BlackBox, values: &[f64]) -> usize {
    first_argmax(&model.predict_proba(values).unwrap())
}

pub fn l0(x: &[f64], xp: &[f64]) -> usize {
    (0..x.len())
        .filter(|&j| (x[j] - xp[j]).abs() > VALUE_TOLERANCE)
        .count()
}

pub fn l2(setup: &Setup, x: &[f64], xp: &[f64]) -> f64 {
    let schema = setup.train.schema();
    let norm = setup.train.normalization();
    let mut sum = 0.0;
    for j in 0..x.len() {
        if schema[j].is_numeric() {
            let d = (x[j] - xp[j]) / norm[j].std;
            sum += d * d;
        } else if x[j] != xp[j] {
            sum += 1.0;
        }
    }
    sum.sqrt()
}

pub fn latent(vae: &VaeModel, x: &[f64], xp: &[f64]) -> f64 {
    euclid(
        &vae.encode_values(x).unwrap().z,
        &vae.encode_values(xp).unwrap().z,
    )
}

/// Changed features whose single reversion still predicts `contrast`; `None`
/// when `xp` itself does not.
pub fn redundant(model: &dyn BlackBox, x: &[f64], xp: &[f64], contrast: usize) -> Option<usize> {
    if label(model, xp) != contrast {
        return None;
    }
    let mut n = 0;
    for j in 0..x.len() {
        if (x[j] - xp[j]).abs() <= VALUE_TOLERANCE {
            continue;
        }
        let mut back = xp.to_vec();
        back[j] = x[j];
        if label(model, &back) == contrast {
            n += 1;
        }
    }
    Some(n)
}

/// Latent codes and labels of the whole pool, computed row by row.
pub struct PoolOracle {
    z: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl PoolOracle {
    pub fn new(setup: &Setup) -> Self {
        let rows = setup.train.rows();
        PoolOracle {
            z: rows
                .iter()
                .map(|r| setup.vae.encode_values(r).unwrap().z)
                .collect(),
            labels: rows
                .iter()
                .map(|r| label(setup.model.as_ref(), r))
                .collect(),
        }
    }

    /// Share of the `k` latent-nearest pool rows (ties by row index) whose
    /// label matches the prediction for `xp`.
    pub fn ynn(&self, setup: &Setup, xp: &[f64], k: usize) -> f64 {
        let target = label(setup.model.as_ref(), xp);
        let z = setup.vae.encode_values(xp).unwrap().z;
        let mut order: Vec<(f64, usize)> = self
            .z
            .iter()
            .enumerate()
            .map(|(i, p)| (euclid(&z, p), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let agree = order[..k]
            .iter()
            .filter(|(_, i)| self.labels[*i] == target)
            .count();
        agree as f64 / k as f64
    }
}

pub struct Pair {
    pub x: Vec<f64>,
    pub xp: Vec<f64>,
    pub contrast: usize,
}

/// `x` from the test split; `xp` copies each feature from a differently
/// predicted test point with probability 0.6.
pub fn random_pairs(setup: &Setup, n: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = setup.model.as_ref();
    let test = setup.test.rows();
    let labels: Vec<usize> = test.iter().map(|r| label(model, r)).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let i = rng.random_range(0..test.len());
        let fact = labels[i];
        let donors: Vec<usize> = (0..test.len()).filter(|&d| labels[d] != fact).collect();
        let d = donors[rng.random_range(0..donors.len())];
        let xp: Vec<f64> = (0..test[i].len())
            .map(|j| {
                if rng.random_bool(0.6) {
                    test[d][j]
                } else {
                    test[i][j]
                }
            })
            .collect();
        out.push(Pair {
            x: test[i].clone(),
            xp,
            contrast: labels[d],
        });
    }
    out
}

#[derive(Debug, Default)]
pub struct MetricCheck {
    pub pairs: usize,
    pub flipped: usize,
}

/// Compares every library metric with the oracle on `n` pairs.
pub fn check_pairs(setup: &Setup, n: usize, seed: u64) -> Result<MetricCheck, String> {
    let pool = PoolOracle::new(setup);
    let model = setup.model.as_ref();
    let explainer = &setup.explainer;
    let schema = setup.train.schema();
    let mut report = MetricCheck::default();
    for (i, p) in random_pairs(setup, n, seed).iter().enumerate() {
        let fail = |what: &str, got: String, want: String| {
            Err(format!("pair {i}: {what} {got}, oracle {want}"))
        };
        let l0_lib = l0_cost(&p.x, &p.xp);
        if l0_lib != l0(&p.x, &p.xp) {
            return fail("l0", l0_lib.to_string(), l0(&p.x, &p.xp).to_string());
        }
        let l2_lib = l2_cost(&p.x, &p.xp, schema, setup.train.normalization());
        if (l2_lib - l2(setup, &p.x, &p.xp)).abs() > 1e-9 {
            return fail("l2", l2_lib.to_string(), l2(setup, &p.x, &p.xp).to_string());
        }
        let (xi, xpi) = (Instance::new(p.x.clone()), Instance::new(p.xp.clone()));
        let lat = vae_distance(&setup.vae, &xi, &xpi).unwrap();
        if (lat - latent(&setup.vae, &p.x, &p.xp)).abs() > 1e-9 {
            return fail(
                "latent distance",
                lat.to_string(),
                latent(&setup.vae, &p.x, &p.xp).to_string(),
            );
        }
        let want = redundant(model, &p.x, &p.xp, p.contrast);
        let got = redundancy(&p.x, &p.xp, model, p.contrast).ok();
        if got != want {
            return fail("redundancy", format!("{got:?}"), format!("{want:?}"));
        }
        if let Some(r) = got {
            report.flipped += 1;
            if r > l0_lib {
                return fail("redundancy above l0", r.to_string(), l0_lib.to_string());
            }
        }
        let ynn = ynn_indexed(&p.xp, explainer.index(), &setup.vae, model, YNN_K).unwrap();
        let want_ynn = pool.ynn(setup, &p.xp, YNN_K);
        if ynn != want_ynn {
            return fail("yNN", ynn.to_string(), want_ynn.to_string());
        }
        if ![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
            .iter()
            .any(|v| (v - ynn).abs() < 1e-12)
        {
            return fail("yNN off the fifths grid", ynn.to_string(), "k = 5".into());
        }
        // the record the explainer attaches must agree with the pieces
        let record = MetricsRecord::compute(explainer, &xi, &xpi, schema, p.contrast).unwrap();
        if record.l0 != l0_lib
            || record.redundancy != want
            || record.ynn != ynn
            || record.l2 != l2_lib
        {
            return fail("record", format!("{record:?}"), "component metrics".into());
        }
        report.pairs += 1;
    }
    Ok(report)
}
