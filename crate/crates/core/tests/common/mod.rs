//! Shared test oracles: central finite differences and random data.
//!
//! The finite-difference oracle only ever evaluates forward passes, so it is
//! independent of the backward implementation it checks.
#![allow(dead_code)] // each test target uses its own subset

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of `f` at `inputs`, one gradient buffer per
/// input array.
pub fn finite_difference<F>(inputs: &[Vec<f64>], f: F) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = vec![0.0; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[p][i] -= FD_STEP;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

/// `|a - b| <= tol * max(1, |a|, |b|)` elementwise.
pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let scale = 1.0f64.max(a.abs()).max(n.abs());
        assert!(
            (a - n).abs() <= tol * scale,
            "{what}[{i}]: analytic {a} vs numeric {n} (tol {tol})"
        );
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}
