//! Forward and backward passes for the toy denoiser. Every forward
//! caches what its backward needs, so the two can never drift apart.

use ndarray::{Array1, Array2, Axis};

use crate::afca::grad::{aggregate_backward, aggregate_with_cache, AggregateCache};
use crate::afca::grad::StreamGrads;
use crate::afca::AfcaWeights;
use crate::attention::{attn_core, attn_core_backward, AttnCache};
use crate::error::{CoreError, ShapeError};
use crate::scalar::{lit, Scalar};

use super::weights::{BlockWeights, Ffn, LayerNorm, ModelWeights, ProjAttn, TimeMlp};
use super::{ModelInputs, ToyModel};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

pub(crate) struct LnCache<T: Scalar> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Array2<T>,
    ln: &LayerNorm<T>,
) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    let dt = lit::<T>(d as f64);
    let eps = lit::<T>(LN_EPS);
    for r in 0..n {
        let row = x.row(r);
        let mu = row.sum() / dt;
        let mut var = T::zero();
        for &v in row {
            var += (v - mu) * (v - mu);
        }
        var /= dt;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..d {
            xhat[(r, c)] = (x[(r, c)] - mu) * inv;
        }
    }
    let mut y = xhat.clone();
    for r in 0..n {
        for c in 0..d {
            y[(r, c)] = y[(r, c)] * ln.gamma[c] + ln.beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `(d_x, d_gamma, d_beta)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    ln: &LayerNorm<T>,
    d_y: &Array2<T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let (n, d) = cache.xhat.dim();
    let dt = lit::<T>(d as f64);
    let mut d_x = Array2::zeros((n, d));
    let mut d_gamma = Array1::zeros(d);
    let mut d_beta = Array1::zeros(d);
    for r in 0..n {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            let dxh = d_y[(r, c)] * ln.gamma[c];
            m1 += dxh;
            m2 += dxh * cache.xhat[(r, c)];
            d_gamma[c] += d_y[(r, c)] * cache.xhat[(r, c)];
            d_beta[c] += d_y[(r, c)];
        }
        m1 /= dt;
        m2 /= dt;
        for c in 0..d {
            let dxh = d_y[(r, c)] * ln.gamma[c];
            d_x[(r, c)] = cache.inv_std[r] * (dxh - m1 - cache.xhat[(r, c)] * m2);
        }
    }
    (d_x, d_gamma, d_beta)
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

fn gelu<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

pub(crate) struct FfnCache<T: Scalar> {
    input: Array2<T>,
    z1: Array2<T>,
    g: Array2<T>,
}

pub(crate) fn ffn_forward<T: Scalar>(x: &Array2<T>, ffn: &Ffn<T>) -> (Array2<T>, FfnCache<T>) {
    let z1 = x.dot(&ffn.w1) + &ffn.b1;
    let g = z1.mapv(gelu);
    let out = g.dot(&ffn.w2) + &ffn.b2;
    (
        out,
        FfnCache {
            input: x.clone(),
            z1,
            g,
        },
    )
}

/// Returns `(d_x, ffn_grads)`.
pub(crate) fn ffn_backward<T: Scalar>(
    cache: &FfnCache<T>,
    ffn: &Ffn<T>,
    d_out: &Array2<T>,
) -> (Array2<T>, Ffn<T>) {
    let d_g = d_out.dot(&ffn.w2.t());
    let d_w2 = cache.g.t().dot(d_out);
    let d_b2 = d_out.sum_axis(Axis(0));
    let d_z1 = &d_g * &cache.z1.mapv(gelu_grad);
    let d_w1 = cache.input.t().dot(&d_z1);
    let d_b1 = d_z1.sum_axis(Axis(0));
    let d_x = d_z1.dot(&ffn.w1.t());
    (
        d_x,
        Ffn {
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
        },
    )
}

// ---------------------------------------------------------------------------
// Projected attention (self, text, reference)
// ---------------------------------------------------------------------------

pub(crate) struct ProjAttnCache<T: Scalar> {
    x: Array2<T>,
    ctx: Array2<T>,
    attn_out: Array2<T>,
    attn: AttnCache<T>,
}

pub(crate) fn proj_attn_forward<T: Scalar>(
    x: &Array2<T>,
    ctx: &Array2<T>,
    w: &ProjAttn<T>,
    heads: usize,
) -> Result<(Array2<T>, ProjAttnCache<T>), CoreError> {
    let q = x.dot(&w.w_q);
    let k = ctx.dot(&w.w_k);
    let v = ctx.dot(&w.w_v);
    let attn = attn_core(&q, &k, &v, heads, None)?;
    let out = attn.out.dot(&w.w_o);
    Ok((
        out,
        ProjAttnCache {
            x: x.clone(),
            ctx: ctx.clone(),
            attn_out: attn.out,
            attn: attn.cache,
        },
    ))
}

/// Returns `(d_x, d_ctx, weight_grads)`; for self-attention the caller
/// adds `d_x + d_ctx` since both roles read the same tensor.
pub(crate) fn proj_attn_backward<T: Scalar>(
    cache: &ProjAttnCache<T>,
    w: &ProjAttn<T>,
    d_out: &Array2<T>,
) -> (Array2<T>, Array2<T>, ProjAttn<T>) {
    let d_attn_out = d_out.dot(&w.w_o.t());
    let d_w_o = cache.attn_out.t().dot(d_out);
    let g = attn_core_backward(&cache.attn, &d_attn_out);
    let d_x = g.d_q.dot(&w.w_q.t());
    let d_ctx = g.d_k.dot(&w.w_k.t()) + g.d_v.dot(&w.w_v.t());
    let grads = ProjAttn {
        w_q: cache.x.t().dot(&g.d_q),
        w_k: cache.ctx.t().dot(&g.d_k),
        w_v: cache.ctx.t().dot(&g.d_v),
        w_o: d_w_o,
    };
    (d_x, d_ctx, grads)
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Interleaved sine/cosine features of a scalar position.
pub(crate) fn sinusoid<T: Scalar>(pos: f64, d: usize) -> Array1<T> {
    let mut e = Array1::zeros(d);
    let mut i = 0;
    while 2 * i < d {
        let freq = (10_000f64).powf(-((2 * i) as f64) / d as f64);
        e[2 * i] = lit::<T>((pos * freq).sin());
        if 2 * i + 1 < d {
            e[2 * i + 1] = lit::<T>((pos * freq).cos());
        }
        i += 1;
    }
    e
}

fn position_table<T: Scalar>(n: usize, d: usize) -> Array2<T> {
    let mut table = Array2::zeros((n, d));
    for p in 0..n {
        table.row_mut(p).assign(&sinusoid(p as f64, d));
    }
    table
}

pub(crate) struct TimeCache<T: Scalar> {
    e: Array1<T>,
    h1: Array1<T>,
    g: Array1<T>,
}

fn time_forward<T: Scalar>(t: usize, w: &TimeMlp<T>) -> (Array1<T>, TimeCache<T>) {
    let e = sinusoid::<T>(t as f64, w.b1.len());
    let h1 = e.dot(&w.w1) + &w.b1;
    let g = h1.mapv(gelu);
    let out = g.dot(&w.w2) + &w.b2;
    (out, TimeCache { e, h1, g })
}

fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let av = a.view().insert_axis(Axis(1));
    let bv = b.view().insert_axis(Axis(0));
    av.dot(&bv)
}

fn time_backward<T: Scalar>(cache: &TimeCache<T>, w: &TimeMlp<T>, d_out: &Array1<T>) -> TimeMlp<T> {
    let d_g = w.w2.dot(d_out);
    let d_w2 = outer(&cache.g, d_out);
    let d_h1 = &d_g * &cache.h1.mapv(gelu_grad);
    let d_w1 = outer(&cache.e, &d_h1);
    TimeMlp {
        w1: d_w1,
        b1: d_h1,
        w2: d_w2,
        b2: d_out.clone(),
    }
}

// ---------------------------------------------------------------------------
// Block
// ---------------------------------------------------------------------------

pub(crate) struct BlockCache<T: Scalar> {
    ln1: LnCache<T>,
    self_attn: ProjAttnCache<T>,
    text_attn: ProjAttnCache<T>,
    ref_attn: ProjAttnCache<T>,
    agg: AggregateCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

pub(crate) struct BlockGrads<T: Scalar> {
    pub weights: BlockWeights<T>,
    pub d_h_in: Array2<T>,
    pub d_f_text: Array2<T>,
    pub d_f_ref: Array2<T>,
    pub streams: Vec<StreamGrads<T>>,
}

/// One block: pre-norm feeds self/text/reference attention, the
/// audio-face attention queries the raw block input, all four branches
/// add residually, then the feed-forward sublayer.
pub(crate) fn block_forward_cached<T: Scalar>(
    h: &Array2<T>,
    inputs: &ModelInputs<T>,
    bw: &BlockWeights<T>,
    heads: usize,
) -> Result<(Array2<T>, BlockCache<T>), CoreError> {
    let (xn, ln1) = layer_norm_forward(h, &bw.ln1);
    let (a_self, self_attn) = proj_attn_forward(&xn, &xn, &bw.self_attn, heads)?;
    let (a_text, text_attn) = proj_attn_forward(&xn, &inputs.f_text, &bw.text_attn, heads)?;
    let (a_ref, ref_attn) = proj_attn_forward(&xn, &inputs.f_ref, &bw.ref_attn, heads)?;
    let (agg_out, agg) =
        aggregate_with_cache(h, inputs.meta(), &inputs.stream_pairs(), &bw.afca)?;
    // agg_out already carries the +h residual.
    let h_mid = agg_out + &a_self + &a_text + &a_ref;
    let (y, ln2) = layer_norm_forward(&h_mid, &bw.ln2);
    let (f, ffn) = ffn_forward(&y, &bw.ffn);
    let h_out = h_mid + &f;
    Ok((
        h_out,
        BlockCache {
            ln1,
            self_attn,
            text_attn,
            ref_attn,
            agg,
            ln2,
            ffn,
        },
    ))
}

pub(crate) fn block_backward<T: Scalar>(
    cache: &BlockCache<T>,
    bw: &BlockWeights<T>,
    d_h_out: &Array2<T>,
) -> BlockGrads<T> {
    // h_out = h_mid + ffn(ln2(h_mid))
    let (d_y, ffn_grads) = ffn_backward(&cache.ffn, &bw.ffn, d_h_out);
    let (d_from_ln2, d_gamma2, d_beta2) = layer_norm_backward(&cache.ln2, &bw.ln2, &d_y);
    let d_h_mid = d_h_out + &d_from_ln2;

    // h_mid = agg_out + a_self + a_text + a_ref
    let agg_grads = aggregate_backward(&cache.agg, &d_h_mid);
    let (d_xn_s, d_xn_s_ctx, self_grads) = proj_attn_backward(&cache.self_attn, &bw.self_attn, &d_h_mid);
    let (d_xn_t, d_f_text, text_grads) = proj_attn_backward(&cache.text_attn, &bw.text_attn, &d_h_mid);
    let (d_xn_r, d_f_ref, ref_grads) = proj_attn_backward(&cache.ref_attn, &bw.ref_attn, &d_h_mid);
    let d_xn = d_xn_s + &d_xn_s_ctx + &d_xn_t + &d_xn_r;
    let (d_from_ln1, d_gamma1, d_beta1) = layer_norm_backward(&cache.ln1, &bw.ln1, &d_xn);
    let d_h_in = &agg_grads.d_h_in + &d_from_ln1;

    let afca = AfcaWeights::new(
        agg_grads.d_weights.d_w_q,
        agg_grads.d_weights.d_w_k,
        agg_grads.d_weights.d_w_v,
        agg_grads.d_weights.d_w_o,
        bw.afca.heads,
    )
    .expect("gradient shapes mirror the forward weights");
    BlockGrads {
        weights: BlockWeights {
            ln1: LayerNorm {
                gamma: d_gamma1,
                beta: d_beta1,
            },
            self_attn: self_grads,
            text_attn: text_grads,
            ref_attn: ref_grads,
            afca,
            ln2: LayerNorm {
                gamma: d_gamma2,
                beta: d_beta2,
            },
            ffn: ffn_grads,
        },
        d_h_in,
        d_f_text,
        d_f_ref,
        streams: agg_grads.streams,
    }
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

pub struct ModelCache<T: Scalar> {
    time: TimeCache<T>,
    blocks: Vec<BlockCache<T>>,
    ln_f: LnCache<T>,
    normed: Array2<T>,
}

/// Gradients of the loss with respect to every parameter and every
/// differentiable input.
pub struct ModelGrads<T: Scalar> {
    pub weights: ModelWeights<T>,
    pub d_x: Array2<T>,
    pub d_f_text: Array2<T>,
    pub d_f_ref: Array2<T>,
    pub streams: Vec<StreamGrads<T>>,
}

/// Validate shapes and build the embedded input the first block sees:
/// tokens plus position table plus broadcast time embedding.
fn embed_input<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &ModelInputs<T>,
    x: &Array2<T>,
    t: usize,
) -> Result<(Array2<T>, TimeCache<T>), CoreError> {
    let cfg = &model.config;
    let meta = inputs.meta();
    let (n, d) = x.dim();
    if n != meta.n_tokens() || d != cfg.d_model {
        return Err(ShapeError::new(
            "model forward",
            format!(
                "tokens ({n}, {d}) vs grid {} tokens, d_model {}",
                meta.n_tokens(),
                cfg.d_model
            ),
        )
        .into());
    }
    if t >= cfg.diffusion_steps {
        return Err(ShapeError::new(
            "model forward",
            format!("timestep {t} outside 0..{}", cfg.diffusion_steps),
        )
        .into());
    }
    for s in &inputs.streams {
        if s.d_af() != cfg.d_af {
            return Err(ShapeError::new(
                "model forward",
                format!("stream '{}' has {} channels, config d_af {}", s.identity_id, s.d_af(), cfg.d_af),
            )
            .into());
        }
    }
    let (temb, time) = time_forward(t, &model.weights.time);
    Ok((x + &position_table::<T>(n, d) + &temb, time))
}

/// Predict noise for flattened latent tokens `x` `(N, d_model)` at
/// timestep `t`. Deterministic: same inputs, same output.
pub fn model_forward<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &ModelInputs<T>,
    x: &Array2<T>,
    t: usize,
) -> Result<(Array2<T>, ModelCache<T>), CoreError> {
    let cfg = &model.config;
    let (mut h, time) = embed_input(model, inputs, x, t)?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for bw in &model.weights.blocks {
        let (next, cache) = block_forward_cached(&h, inputs, bw, cfg.heads)?;
        h = next;
        blocks.push(cache);
    }
    let (normed, ln_f) = layer_norm_forward(&h, &model.weights.ln_f);
    let eps = normed.dot(&model.weights.head_w) + &model.weights.head_b;
    Ok((
        eps,
        ModelCache {
            time,
            blocks,
            ln_f,
            normed,
        },
    ))
}

/// Token states around each block at timestep `t`: entry `0` is the
/// embedded input, entry `i + 1` the output of block `i`. The last entry
/// is the state the final norm and head consume. Inspection-only: for the
/// prediction itself use [`model_forward`].
pub fn hidden_states<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &ModelInputs<T>,
    x: &Array2<T>,
    t: usize,
) -> Result<Vec<Array2<T>>, CoreError> {
    let (h0, _) = embed_input(model, inputs, x, t)?;
    let mut states = vec![h0];
    for bw in &model.weights.blocks {
        let (next, _) =
            block_forward_cached(states.last().expect("states start non-empty"), inputs, bw, model.config.heads)?;
        states.push(next);
    }
    Ok(states)
}

/// Backward of [`model_forward`] given `dL/d eps`.
pub fn model_backward<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &ModelInputs<T>,
    cache: &ModelCache<T>,
    d_eps: &Array2<T>,
) -> ModelGrads<T> {
    let w = &model.weights;
    let d_normed = d_eps.dot(&w.head_w.t());
    let head_w_grad = cache.normed.t().dot(d_eps);
    let head_b_grad = d_eps.sum_axis(Axis(0));
    let (mut d_h, gamma_f, beta_f) = layer_norm_backward(&cache.ln_f, &w.ln_f, &d_normed);

    let mut block_grads: Vec<BlockWeights<T>> = Vec::with_capacity(w.blocks.len());
    let mut d_f_text = Array2::zeros(inputs.f_text.dim());
    let mut d_f_ref = Array2::zeros(inputs.f_ref.dim());
    let mut stream_grads: Vec<StreamGrads<T>> = inputs
        .streams
        .iter()
        .map(|s| StreamGrads {
            identity_id: s.identity_id.clone(),
            d_audio: Array2::zeros(s.audio.tokens.dim()),
            d_face: Array2::zeros(s.face.tokens.dim()),
        })
        .collect();

    for (bc, bw) in cache.blocks.iter().zip(&w.blocks).rev() {
        let g = block_backward(bc, bw, &d_h);
        d_h = g.d_h_in;
        d_f_text += &g.d_f_text;
        d_f_ref += &g.d_f_ref;
        for (acc, got) in stream_grads.iter_mut().zip(&g.streams) {
            acc.d_audio += &got.d_audio;
            acc.d_face += &got.d_face;
        }
        block_grads.push(g.weights);
    }
    block_grads.reverse();

    // h0 = x + pos + temb: token grads pass through, the time bias
    // collects the row sum.
    let d_temb = d_h.sum_axis(Axis(0));
    let time_grads = time_backward(&cache.time, &w.time, &d_temb);

    ModelGrads {
        weights: ModelWeights {
            blocks: block_grads,
            time: time_grads,
            ln_f: LayerNorm {
                gamma: gamma_f,
                beta: beta_f,
            },
            head_w: head_w_grad,
            head_b: head_b_grad,
        },
        d_x: d_h,
        d_f_text,
        d_f_ref,
        streams: stream_grads,
    }
}
