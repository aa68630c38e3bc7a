//! Cached forward passes and hand-written backward passes for the audio-face
//! attention block.
//!
//! Every public forward in the parent module delegates here, so there is
//! exactly one forward implementation; dropping the cache recovers the plain
//! forward. Gradients flow to the video tokens (residual and query paths),
//! to all four projection matrices (accumulated across identities, since the
//! weights are shared), and to each identity's audio and face tokens. Token
//! gates and temporal masks are data, not parameters; they get no gradient.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, Axis};

use crate::attention::{attn_core, attn_core_backward, AttnCache};
use crate::error::{CoreError, ShapeError, ValidationError};
use crate::grid::GridMeta;
use crate::mask::TokenMask;
use crate::scalar::Scalar;

use super::{
    build_temporal_mask, kv_with_concat, AfcaWeights, IdentityStream, TemporalAttentionMask,
};

// ---------------------------------------------------------------------------
// Masked cross attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MhcaCache<T: Scalar> {
    h_flat: Array2<T>,
    attn: AttnCache<T>,
    pre_wo: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct MhcaGrads<T: Scalar> {
    pub d_h: Array2<T>,
    pub d_k_af: Array2<T>,
    pub d_v_af: Array2<T>,
    pub d_w_q: Array2<T>,
    pub d_w_o: Array2<T>,
}

pub(crate) fn mhca_cached<T: Scalar>(
    h_flat: &Array2<T>,
    meta: GridMeta,
    k_af: &Array2<T>,
    v_af: &Array2<T>,
    temporal_mask: &TemporalAttentionMask,
    weights: &AfcaWeights<T>,
) -> Result<(Array2<T>, MhcaCache<T>), CoreError> {
    let (n, d_model) = h_flat.dim();
    if n != meta.n_tokens() || d_model != weights.d_model() {
        return Err(ShapeError::new(
            "masked cross attention",
            format!(
                "video tokens ({n}, {d_model}) vs grid {} tokens and model dim {}",
                meta.n_tokens(),
                weights.d_model()
            ),
        )
        .into());
    }
    let m = temporal_mask.audio_cols() + temporal_mask.face_cols();
    if k_af.nrows() != m || v_af.nrows() != m {
        return Err(ShapeError::new(
            "masked cross attention",
            format!(
                "{} keys / {} values vs {} mask columns",
                k_af.nrows(),
                v_af.nrows(),
                m
            ),
        )
        .into());
    }
    let allow = temporal_mask.expand(meta)?;
    let q = h_flat.dot(&weights.w_q);
    let fwd = attn_core(&q, k_af, v_af, weights.heads, Some(&allow))?;
    let out = fwd.out.dot(&weights.w_o);
    Ok((
        out,
        MhcaCache {
            h_flat: h_flat.clone(),
            attn: fwd.cache,
            pre_wo: fwd.out,
        },
    ))
}

pub(crate) fn mhca_backward<T: Scalar>(
    cache: &MhcaCache<T>,
    weights: &AfcaWeights<T>,
    d_out: &Array2<T>,
) -> MhcaGrads<T> {
    let d_pre_wo = d_out.dot(&weights.w_o.t());
    let d_w_o = cache.pre_wo.t().dot(d_out);
    let attn_grads = attn_core_backward(&cache.attn, &d_pre_wo);
    let d_w_q = cache.h_flat.t().dot(&attn_grads.d_q);
    let d_h = attn_grads.d_q.dot(&weights.w_q.t());
    MhcaGrads {
        d_h,
        d_k_af: attn_grads.d_k,
        d_v_af: attn_grads.d_v,
        d_w_q,
        d_w_o,
    }
}

// ---------------------------------------------------------------------------
// Single identity: kv assembly + attention + gate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StreamCache<T: Scalar> {
    identity_id: String,
    concat_af: Array2<T>,
    audio_rows: usize,
    gate: Array1<T>,
    mhca: MhcaCache<T>,
}

/// Gradients flowing into one identity's conditioning tokens.
#[derive(Debug, Clone)]
pub struct StreamGrads<T: Scalar> {
    pub identity_id: String,
    pub d_audio: Array2<T>,
    pub d_face: Array2<T>,
}

pub(crate) fn afca_cached<T: Scalar>(
    h: &Array2<T>,
    meta: GridMeta,
    stream: &IdentityStream<T>,
    weights: &AfcaWeights<T>,
    token_mask: &TokenMask<T>,
) -> Result<(Array2<T>, StreamCache<T>), CoreError> {
    if token_mask.meta() != meta {
        return Err(ShapeError::new(
            "gated attention",
            format!(
                "token mask holds {} gates, grid has {} tokens",
                token_mask.len(),
                meta.n_tokens()
            ),
        )
        .into());
    }
    let (concat_af, k_af, v_af) = kv_with_concat(stream, weights)?;
    let tmask = build_temporal_mask(meta.t_lat, stream.audio.len(), stream.face.len())?;
    let (mut out, mhca) = mhca_cached(h, meta, &k_af, &v_af, &tmask, weights)?;
    let gate = token_mask.values().clone();
    for (mut row, g) in out.axis_iter_mut(Axis(0)).zip(gate.iter()) {
        row.mapv_inplace(|x| x * *g);
    }
    Ok((
        out,
        StreamCache {
            identity_id: stream.identity_id.clone(),
            concat_af,
            audio_rows: stream.audio.len(),
            gate,
            mhca,
        },
    ))
}

/// Returns the query-path gradient w.r.t. the shared video tokens, the
/// per-stream token gradients, and this stream's weight-gradient share.
fn stream_backward<T: Scalar>(
    cache: &StreamCache<T>,
    weights: &AfcaWeights<T>,
    d_gated: &Array2<T>,
) -> (Array2<T>, StreamGrads<T>, AfcaWeightGrads<T>) {
    // Gate backward: the gate multiplies rows, so it scales the upstream.
    let mut d_mca = d_gated.clone();
    for (mut row, g) in d_mca.axis_iter_mut(Axis(0)).zip(cache.gate.iter()) {
        row.mapv_inplace(|x| x * *g);
    }

    let mhca_grads = mhca_backward(&cache.mhca, weights, &d_mca);

    let d_concat =
        mhca_grads.d_k_af.dot(&weights.w_k.t()) + mhca_grads.d_v_af.dot(&weights.w_v.t());
    let d_w_k = cache.concat_af.t().dot(&mhca_grads.d_k_af);
    let d_w_v = cache.concat_af.t().dot(&mhca_grads.d_v_af);

    let a = cache.audio_rows;
    let grads = StreamGrads {
        identity_id: cache.identity_id.clone(),
        d_audio: d_concat.slice(s![..a, ..]).to_owned(),
        d_face: d_concat.slice(s![a.., ..]).to_owned(),
    };
    let weight_grads = AfcaWeightGrads {
        d_w_q: mhca_grads.d_w_q,
        d_w_k,
        d_w_v,
        d_w_o: mhca_grads.d_w_o,
    };
    (mhca_grads.d_h, grads, weight_grads)
}

// ---------------------------------------------------------------------------
// Aggregation across identities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AggregateCache<T: Scalar> {
    weights: AfcaWeights<T>,
    streams: Vec<StreamCache<T>>,
}

/// Gradients of all four shared projections, summed over identities.
#[derive(Debug, Clone)]
pub struct AfcaWeightGrads<T: Scalar> {
    pub d_w_q: Array2<T>,
    pub d_w_k: Array2<T>,
    pub d_w_v: Array2<T>,
    pub d_w_o: Array2<T>,
}

impl<T: Scalar> AfcaWeightGrads<T> {
    pub fn zeros_like(weights: &AfcaWeights<T>) -> Self {
        Self {
            d_w_q: Array2::zeros(weights.w_q.dim()),
            d_w_k: Array2::zeros(weights.w_k.dim()),
            d_w_v: Array2::zeros(weights.w_v.dim()),
            d_w_o: Array2::zeros(weights.w_o.dim()),
        }
    }

    fn accumulate(&mut self, other: &AfcaWeightGrads<T>) {
        self.d_w_q += &other.d_w_q;
        self.d_w_k += &other.d_w_k;
        self.d_w_v += &other.d_w_v;
        self.d_w_o += &other.d_w_o;
    }
}

#[derive(Debug, Clone)]
pub struct AggregateGrads<T: Scalar> {
    /// Residual plus all query paths.
    pub d_h_in: Array2<T>,
    pub d_weights: AfcaWeightGrads<T>,
    /// Per-identity token gradients, in input stream order.
    pub streams: Vec<StreamGrads<T>>,
}

pub(crate) fn aggregate_cached<T: Scalar>(
    h_in: &Array2<T>,
    meta: GridMeta,
    streams: &[(&IdentityStream<T>, &TokenMask<T>)],
    weights: &AfcaWeights<T>,
) -> Result<(Array2<T>, AggregateCache<T>), CoreError> {
    let (n, d_model) = h_in.dim();
    if n != meta.n_tokens() || d_model != weights.d_model() {
        return Err(ShapeError::new(
            "identity aggregation",
            format!(
                "video tokens ({n}, {d_model}) vs grid {} tokens and model dim {}",
                meta.n_tokens(),
                weights.d_model()
            ),
        )
        .into());
    }
    let mut seen = BTreeSet::new();
    for (stream, _) in streams {
        if !seen.insert(stream.identity_id.as_str()) {
            return Err(ValidationError::new(
                "identity aggregation",
                format!("duplicate identity '{}'", stream.identity_id),
            )
            .into());
        }
    }

    let mut out = h_in.clone();
    let mut caches = Vec::with_capacity(streams.len());
    for (stream, mask) in streams {
        // Queries always come from the ORIGINAL h_in, never the running sum.
        let (contribution, cache) = afca_cached(h_in, meta, stream, weights, mask)?;
        out += &contribution;
        caches.push(cache);
    }
    Ok((
        out,
        AggregateCache {
            weights: weights.clone(),
            streams: caches,
        },
    ))
}

/// Backward of the full aggregation given `dL/dH_out`.
pub fn aggregate_backward<T: Scalar>(
    cache: &AggregateCache<T>,
    d_h_out: &Array2<T>,
) -> AggregateGrads<T> {
    let mut d_h_in = d_h_out.clone();
    let mut d_weights = AfcaWeightGrads::zeros_like(&cache.weights);
    let mut streams = Vec::with_capacity(cache.streams.len());
    for stream_cache in &cache.streams {
        let (d_h_query, stream_grads, weight_share) =
            stream_backward(stream_cache, &cache.weights, d_h_out);
        d_h_in += &d_h_query;
        d_weights.accumulate(&weight_share);
        streams.push(stream_grads);
    }
    AggregateGrads {
        d_h_in,
        d_weights,
        streams,
    }
}

/// Forward that keeps the cache, for callers that will run
/// [`aggregate_backward`]; the plain forward in the parent module discards
/// it.
pub fn aggregate_with_cache<T: Scalar>(
    h_in: &Array2<T>,
    meta: GridMeta,
    streams: &[(&IdentityStream<T>, &TokenMask<T>)],
    weights: &AfcaWeights<T>,
) -> Result<(Array2<T>, AggregateCache<T>), CoreError> {
    aggregate_cached(h_in, meta, streams, weights)
}
