//! Helpers shared by unit tests: seeded random tensors and error norms.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::{lit, Scalar};

pub fn randn2<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = rng.sample(StandardNormal);
        lit::<T>(x)
    })
}

pub fn randn1<T: Scalar>(rng: &mut impl Rng, len: usize) -> Array1<T> {
    Array1::from_shape_fn(len, |_| {
        let x: f64 = rng.sample(StandardNormal);
        lit::<T>(x)
    })
}

pub fn max_abs_diff<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs().to_f64().unwrap())
        .fold(0.0, f64::max)
}

/// Reference attention: explicit loops over heads, queries, and keys, with
/// the softmax taken over the allowed key subset only. Deliberately shares
/// no code with the production kernel.
pub fn dense_attention_oracle(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    allow: Option<&Array2<bool>>,
) -> Array2<f64> {
    let (n, qd) = q.dim();
    let (m, vd) = v.dim();
    let d_k = qd / heads;
    let d_v = vd / heads;
    let mut out = Array2::zeros((n, vd));
    for h in 0..heads {
        for i in 0..n {
            let allowed: Vec<usize> = (0..m)
                .filter(|j| allow.map_or(true, |a| a[(i, *j)]))
                .collect();
            let mut logits = Vec::with_capacity(allowed.len());
            for &j in &allowed {
                let mut dot = 0.0;
                for c in 0..d_k {
                    dot += q[(i, h * d_k + c)] * k[(j, h * d_k + c)];
                }
                logits.push(dot / (d_k as f64).sqrt());
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (&j, e) in allowed.iter().zip(&exps) {
                let w = e / denom;
                for c in 0..d_v {
                    out[(i, h * d_v + c)] += w * v[(j, h * d_v + c)];
                }
            }
        }
    }
    out
}

/// Relative error between an analytic and a finite-difference gradient,
/// guarded against both being near zero.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}
