mod common;

use common::gradients::{logistic_point, mlp_point, vae_image_point, vae_tabular_point, TOLERANCE};

const POINTS: [u64; 5] = [11, 12, 13, 14, 15];

#[test]
fn logistic_gradient_matches_finite_differences() {
    for seed in POINTS {
        let err = logistic_point(seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    for seed in POINTS {
        let err = mlp_point(seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn tabular_vae_gradient_matches_finite_differences() {
    for seed in POINTS {
        let err = vae_tabular_point(seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn image_vae_gradient_matches_finite_differences() {
    let digits = common::digits();
    for seed in POINTS {
        let err = vae_image_point(&digits, seed);
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}
