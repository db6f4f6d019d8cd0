#![allow(dead_code)]

use rfn_core::numcore::{Real, Tensor};
use rfn_core::rng::Rng;

/// Uniform values in `[lo, hi)`.
pub fn random<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.uniform(lo, hi)))
}

/// Uniform values in `[-1, 1)` kept at least 0.05 away from zero, so
/// kinks of relu/max never sit within a finite-difference step.
pub fn random_away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform(0.05, 1.0);
        if rng.next_u64() & 1 == 0 {
            v
        } else {
            -v
        }
    })
}

pub fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y} (tol {tol})");
    }
}
