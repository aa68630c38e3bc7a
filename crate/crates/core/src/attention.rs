//! Masked multi-head scaled dot-product attention over flat token matrices.
//!
//! This kernel is shared by every attention site in the crate: the
//! per-identity audio-face attention and the self/text/reference attention
//! inside the toy denoiser all call [`attn_core`] with different projections.
//! The forward pass returns a cache so callers can run the hand-written
//! backward pass for gradient checks and training.
//!
//! Masking policy: disallowed logits receive an additive `-1e9` bias before
//! the softmax, and the resulting probabilities are then zeroed and the row
//! renormalized. The second step makes masked weights exactly zero, so oracle
//! comparisons against attention over the reduced key set hold to equality
//! rather than within an epsilon.

use ndarray::{s, Array2, Axis};

use crate::error::{CoreError, ShapeError, ValidationError};
use crate::scalar::{lit, Scalar};

/// Additive bias for disallowed logits; large enough that the bias alone
/// drives the raw softmax weight to numerical zero.
pub const MASK_BIAS: f64 = -1e9;

/// Forward result: concatenated head outputs plus what backward needs.
#[derive(Debug, Clone)]
pub struct AttnForward<T: Scalar> {
    /// `(N, d_v·h)` concatenated per-head attention outputs.
    pub out: Array2<T>,
    pub cache: AttnCache<T>,
}

/// Saved activations for [`attn_core_backward`].
#[derive(Debug, Clone)]
pub struct AttnCache<T: Scalar> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Post-renormalization probabilities, one `(N, M)` matrix per head.
    probs: Vec<Array2<T>>,
    heads: usize,
    d_k: usize,
    d_v: usize,
}

/// Gradients of [`attn_core`] inputs.
#[derive(Debug, Clone)]
pub struct AttnGrads<T: Scalar> {
    pub d_q: Array2<T>,
    pub d_k: Array2<T>,
    pub d_v: Array2<T>,
}

/// Multi-head attention of `q` `(N, d_k·h)` over `k` `(M, d_k·h)` /
/// `v` `(M, d_v·h)`. `allow[(n, m)] == false` removes key `m` from query
/// `n`'s softmax; `None` allows everything.
pub fn attn_core<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    allow: Option<&Array2<bool>>,
) -> Result<AttnForward<T>, CoreError> {
    let (n, qd) = q.dim();
    let (m, kd) = k.dim();
    let (mv, vd) = v.dim();
    if heads == 0 {
        return Err(ShapeError::new("attention", "head count must be >= 1").into());
    }
    if qd != kd {
        return Err(ShapeError::new(
            "attention",
            format!("query dim {qd} != key dim {kd}"),
        )
        .into());
    }
    if qd % heads != 0 || vd % heads != 0 {
        return Err(ShapeError::new(
            "attention",
            format!("dims q={qd}, v={vd} not divisible by {heads} heads"),
        )
        .into());
    }
    if m != mv {
        return Err(ShapeError::new(
            "attention",
            format!("{m} keys vs {mv} value rows"),
        )
        .into());
    }
    if m == 0 {
        return Err(ShapeError::new("attention", "empty key set").into());
    }
    if let Some(mask) = allow {
        if mask.dim() != (n, m) {
            return Err(ShapeError::new(
                "attention",
                format!("mask {:?} vs logits ({n}, {m})", mask.dim()),
            )
            .into());
        }
        for (row, mask_row) in mask.axis_iter(Axis(0)).enumerate() {
            if !mask_row.iter().any(|a| *a) {
                return Err(ValidationError::new(
                    "attention",
                    format!("query {row} has no allowed keys"),
                )
                .into());
            }
        }
    }

    let d_k = qd / heads;
    let d_v = vd / heads;
    let scale = lit::<T>(1.0 / (d_k as f64).sqrt());
    let bias = lit::<T>(MASK_BIAS);

    let mut out = Array2::zeros((n, vd));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_h = q.slice(s![.., h * d_k..(h + 1) * d_k]);
        let k_h = k.slice(s![.., h * d_k..(h + 1) * d_k]);
        let v_h = v.slice(s![.., h * d_v..(h + 1) * d_v]);

        let mut logits = q_h.dot(&k_h.t()) * scale;
        if let Some(mask) = allow {
            ndarray::Zip::from(&mut logits).and(mask).for_each(|l, a| {
                if !*a {
                    *l += bias;
                }
            });
        }

        // Row-wise stable softmax, then force masked weights to exact zero.
        let mut p = logits;
        for (row_idx, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|l| (l - max).exp());
            if let Some(mask) = allow {
                for (j, val) in row.iter_mut().enumerate() {
                    if !mask[(row_idx, j)] {
                        *val = T::zero();
                    }
                }
            }
            let sum: T = row.iter().cloned().sum();
            debug_assert!(sum > T::zero());
            row.mapv_inplace(|e| e / sum);
        }

        out.slice_mut(s![.., h * d_v..(h + 1) * d_v])
            .assign(&p.dot(&v_h));
        probs.push(p);
    }

    Ok(AttnForward {
        out,
        cache: AttnCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            heads,
            d_k,
            d_v,
        },
    })
}

/// Backward pass of [`attn_core`] given the upstream gradient `d_out`
/// `(N, d_v·h)`.
///
/// The renormalized masked softmax equals a softmax over the reduced key
/// set, so the standard softmax Jacobian applied to the cached probabilities
/// already yields exactly zero gradient at masked positions.
pub fn attn_core_backward<T: Scalar>(cache: &AttnCache<T>, d_out: &Array2<T>) -> AttnGrads<T> {
    let (n, _) = cache.q.dim();
    let (m, _) = cache.k.dim();
    assert_eq!(d_out.dim(), (n, cache.d_v * cache.heads));

    let scale = lit::<T>(1.0 / (cache.d_k as f64).sqrt());
    let mut d_q = Array2::zeros(cache.q.dim());
    let mut d_k = Array2::zeros(cache.k.dim());
    let mut d_v = Array2::zeros(cache.v.dim());

    for h in 0..cache.heads {
        let q_h = cache.q.slice(s![.., h * cache.d_k..(h + 1) * cache.d_k]);
        let k_h = cache.k.slice(s![.., h * cache.d_k..(h + 1) * cache.d_k]);
        let v_h = cache.v.slice(s![.., h * cache.d_v..(h + 1) * cache.d_v]);
        let p = &cache.probs[h];
        let d_out_h = d_out.slice(s![.., h * cache.d_v..(h + 1) * cache.d_v]);

        let d_p = d_out_h.dot(&v_h.t());
        d_v.slice_mut(s![.., h * cache.d_v..(h + 1) * cache.d_v])
            .assign(&p.t().dot(&d_out_h));

        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), then undo the logit scale.
        let pdp = p * &d_p;
        let row_sums = pdp.sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_logits = (p * &(d_p - &row_sums)) * scale;
        debug_assert_eq!(d_logits.dim(), (n, m));

        d_q.slice_mut(s![.., h * cache.d_k..(h + 1) * cache.d_k])
            .assign(&d_logits.dot(&k_h));
        d_k.slice_mut(s![.., h * cache.d_k..(h + 1) * cache.d_k])
            .assign(&d_logits.t().dot(&q_h));
    }

    AttnGrads { d_q, d_k, d_v }
}
