//! Shared helpers for the integration test suites.

#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vfdadv::Tensor;

/// Central-difference step matched to 64-bit precision.
pub const FD_STEP: f64 = 1e-6;
/// Relative-error bound every analytic gradient must meet.
pub const FD_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in [-1, 1).
pub fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

pub fn fill(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| unit(rng)).collect()
}

/// Uniform draw bounded away from zero, for ops with a kink at the origin.
pub fn fill_off_origin(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks analytic gradients of a scalar-valued function against central
/// finite differences at every coordinate of `x0`.
///
/// `loss_fn` must build the loss from scratch on each call; it receives a
/// grad-requiring tensor for the analytic pass and constant tensors for the
/// numeric probes.
pub fn check_gradient(
    label: &str,
    x0: &[f64],
    shape: &[usize],
    loss_fn: impl Fn(&Tensor<f64>) -> Tensor<f64>,
) {
    let x = Tensor::param(x0.to_vec(), shape.to_vec()).unwrap();
    let loss = loss_fn(&x);
    loss.backward()
        .unwrap_or_else(|e| panic!("{label}: backward failed: {e}"));
    let analytic = x
        .grad()
        .unwrap_or_else(|| panic!("{label}: no gradient accumulated"));

    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += FD_STEP;
        let mut minus = x0.to_vec();
        minus[i] -= FD_STEP;
        let lp = loss_fn(&Tensor::new(plus, shape.to_vec()).unwrap()).item();
        let lm = loss_fn(&Tensor::new(minus, shape.to_vec()).unwrap()).item();
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let err = rel_err(analytic[i], numeric);
        assert!(
            err < FD_TOL,
            "{label}: coordinate {i}: analytic {} vs numeric {} (rel err {err:.3e})",
            analytic[i],
            numeric
        );
    }
}
