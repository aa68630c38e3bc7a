//! Audio-face cross attention: per-identity conditioning of a shared video
//! token grid.
//!
//! Each drivable identity contributes one attention pass: video queries
//! attend over that identity's audio tokens concatenated with its face
//! token(s), under a temporal mask that binds each latent frame to a local
//! audio window. The result is gated by the identity's token mask and the
//! gated outputs of all identities are summed onto the input, using one
//! shared weight set regardless of identity count.

pub mod grad;

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, ShapeError, ValidationError};
use crate::grid::{GridMeta, VideoTokenGrid};
use crate::mask::{token_mask_from_bbox, PadPolicy, PatchSpec, PixelMask, TokenMask};
use crate::scalar::{lit, Scalar};

/// Audio tokens bound to frame `t >= 1`: window `[4(t-1), 4t)`.
pub const AUDIO_TOKENS_PER_FRAME: usize = 4;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Conditioning audio tokens for one identity, `(A, d_af)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTokenStream<T: Scalar> {
    pub tokens: Array2<T>,
    pub identity_id: String,
}

impl<T: Scalar> AudioTokenStream<T> {
    pub fn new(tokens: Array2<T>, identity_id: impl Into<String>) -> Result<Self, CoreError> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(ShapeError::new("audio tokens", "need at least one token and channel").into());
        }
        check_finite("audio tokens", &tokens)?;
        Ok(Self {
            tokens,
            identity_id: identity_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Face token(s) for one identity, `(F, d_af)`; F is 1 for a pooled token.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTokens<T: Scalar> {
    pub tokens: Array2<T>,
    pub identity_id: String,
}

impl<T: Scalar> FaceTokens<T> {
    pub fn new(tokens: Array2<T>, identity_id: impl Into<String>) -> Result<Self, CoreError> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(ShapeError::new("face tokens", "need at least one token and channel").into());
        }
        check_finite("face tokens", &tokens)?;
        Ok(Self {
            tokens,
            identity_id: identity_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

fn check_finite<T: Scalar>(context: &'static str, m: &Array2<T>) -> Result<(), ValidationError> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(ValidationError::new(context, "non-finite entry"));
    }
    Ok(())
}

/// One drivable identity: audio, face token(s), and the pixel-space face
/// region, all carrying the same identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityStream<T: Scalar> {
    pub audio: AudioTokenStream<T>,
    pub face: FaceTokens<T>,
    pub pixel_mask: PixelMask,
    pub identity_id: String,
}

impl<T: Scalar> IdentityStream<T> {
    pub fn new(
        audio: AudioTokenStream<T>,
        face: FaceTokens<T>,
        pixel_mask: PixelMask,
    ) -> Result<Self, ValidationError> {
        if audio.identity_id != face.identity_id {
            return Err(ValidationError::new(
                "identity stream",
                format!(
                    "audio labeled '{}' but face labeled '{}'",
                    audio.identity_id, face.identity_id
                ),
            ));
        }
        if audio.tokens.ncols() != face.tokens.ncols() {
            return Err(ValidationError::new(
                "identity stream",
                format!(
                    "audio channels {} != face channels {}",
                    audio.tokens.ncols(),
                    face.tokens.ncols()
                ),
            ));
        }
        let identity_id = audio.identity_id.clone();
        Ok(Self {
            audio,
            face,
            pixel_mask,
            identity_id,
        })
    }

    /// Conditioning channel count shared by audio and face tokens.
    pub fn d_af(&self) -> usize {
        self.audio.tokens.ncols()
    }
}

/// Boolean allow-matrix `(T_lat, A + F)`: which audio/face columns each
/// latent frame may attend to. Audio columns come first, face columns last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalAttentionMask {
    allow: Array2<bool>,
    audio_cols: usize,
    face_cols: usize,
}

impl TemporalAttentionMask {
    pub fn allow(&self) -> &Array2<bool> {
        &self.allow
    }

    pub fn t_lat(&self) -> usize {
        self.allow.nrows()
    }

    pub fn audio_cols(&self) -> usize {
        self.audio_cols
    }

    pub fn face_cols(&self) -> usize {
        self.face_cols
    }

    /// Broadcast frame rows to query rows: query token `n` gets the row of
    /// its latent frame.
    pub fn expand(&self, meta: GridMeta) -> Result<Array2<bool>, ShapeError> {
        if meta.t_lat != self.t_lat() {
            return Err(ShapeError::new(
                "temporal mask",
                format!("mask has {} frames, grid has {}", self.t_lat(), meta.t_lat),
            ));
        }
        let cols = self.allow.ncols();
        Ok(Array2::from_shape_fn((meta.n_tokens(), cols), |(n, j)| {
            self.allow[(meta.frame_of(n), j)]
        }))
    }
}

/// Projection weights of one attention block, shared across every identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AfcaWeights<T: Scalar> {
    /// `(d_model, d_k·h)` query projection applied to video tokens.
    pub w_q: Array2<T>,
    /// `(d_af, d_k·h)` key projection applied to audio-face tokens.
    pub w_k: Array2<T>,
    /// `(d_af, d_v·h)` value projection applied to audio-face tokens.
    pub w_v: Array2<T>,
    /// `(d_v·h, d_model)` output projection.
    pub w_o: Array2<T>,
    pub heads: usize,
}

impl<T: Scalar> AfcaWeights<T> {
    pub fn new(
        w_q: Array2<T>,
        w_k: Array2<T>,
        w_v: Array2<T>,
        w_o: Array2<T>,
        heads: usize,
    ) -> Result<Self, ShapeError> {
        if heads == 0 {
            return Err(ShapeError::new("attention weights", "head count must be >= 1"));
        }
        let (d_model, dk_h) = w_q.dim();
        let (d_af_k, dk_h2) = w_k.dim();
        let (d_af_v, dv_h) = w_v.dim();
        let (dv_h2, d_model2) = w_o.dim();
        if dk_h != dk_h2 {
            return Err(ShapeError::new(
                "attention weights",
                format!("query dim {dk_h} != key dim {dk_h2}"),
            ));
        }
        if d_af_k != d_af_v {
            return Err(ShapeError::new(
                "attention weights",
                format!("key input dim {d_af_k} != value input dim {d_af_v}"),
            ));
        }
        if dv_h != dv_h2 {
            return Err(ShapeError::new(
                "attention weights",
                format!("value dim {dv_h} != output input dim {dv_h2}"),
            ));
        }
        if d_model != d_model2 {
            return Err(ShapeError::new(
                "attention weights",
                format!("query input dim {d_model} != output dim {d_model2}"),
            ));
        }
        if dk_h % heads != 0 || dv_h % heads != 0 {
            return Err(ShapeError::new(
                "attention weights",
                format!("projection dims ({dk_h}, {dv_h}) not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    /// Gaussian init scaled by 1/sqrt(fan_in) per matrix.
    pub fn random(
        d_model: usize,
        d_af: usize,
        d_k: usize,
        d_v: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ShapeError> {
        let mut init = |rows: usize, cols: usize| -> Array2<T> {
            let scale = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                let x: f64 = rng.sample(StandardNormal);
                lit::<T>(x * scale)
            })
        };
        let w_q = init(d_model, d_k * heads);
        let w_k = init(d_af, d_k * heads);
        let w_v = init(d_af, d_v * heads);
        let w_o = init(d_v * heads, d_model);
        Self::new(w_q, w_k, w_v, w_o, heads)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_af(&self) -> usize {
        self.w_k.nrows()
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Build the frame-to-audio-window allow-matrix.
///
/// Frame 0 sees every audio token; frame `t >= 1` sees exactly the window
/// `[4(t-1), 4t)`; every frame sees all face columns. Surplus audio beyond
/// `4(T_lat - 1)` is visible only to frame 0.
pub fn build_temporal_mask(
    t_lat: usize,
    a: usize,
    f: usize,
) -> Result<TemporalAttentionMask, CoreError> {
    if t_lat == 0 {
        return Err(ShapeError::new("temporal mask", "need at least one latent frame").into());
    }
    if a == 0 {
        return Err(ShapeError::new("temporal mask", "need at least one audio token").into());
    }
    let required = AUDIO_TOKENS_PER_FRAME * (t_lat - 1);
    if a < required {
        return Err(ValidationError::new(
            "temporal mask",
            format!(
                "{a} audio tokens cannot cover {t_lat} latent frames; requires A >= {required}"
            ),
        )
        .into());
    }
    let allow = Array2::from_shape_fn((t_lat, a + f), |(t, j)| {
        if j >= a {
            // Face columns are visible from every frame.
            true
        } else if t == 0 {
            true
        } else {
            let lo = AUDIO_TOKENS_PER_FRAME * (t - 1);
            let hi = (AUDIO_TOKENS_PER_FRAME * t).min(a);
            (lo..hi).contains(&j)
        }
    });
    Ok(TemporalAttentionMask {
        allow,
        audio_cols: a,
        face_cols: f,
    })
}

/// Stack audio tokens over face tokens, matching temporal-mask column order.
pub(crate) fn concat_audio_face<T: Scalar>(stream: &IdentityStream<T>) -> Array2<T> {
    concatenate(
        Axis(0),
        &[stream.audio.tokens.view(), stream.face.tokens.view()],
    )
    .expect("audio and face share a channel dim by construction")
}

/// Like [`audio_face_kv`] but also hands back the concatenated tokens,
/// which the backward pass needs.
pub(crate) fn kv_with_concat<T: Scalar>(
    stream: &IdentityStream<T>,
    weights: &AfcaWeights<T>,
) -> Result<(Array2<T>, Array2<T>, Array2<T>), CoreError> {
    if stream.d_af() != weights.d_af() {
        return Err(ShapeError::new(
            "audio-face projection",
            format!(
                "stream channels {} != weight input dim {}",
                stream.d_af(),
                weights.d_af()
            ),
        )
        .into());
    }
    let concat = concat_audio_face(stream);
    let k = concat.dot(&weights.w_k);
    let v = concat.dot(&weights.w_v);
    Ok((concat, k, v))
}

/// Project the concatenated audio-face tokens to keys and values:
/// `K_af = [audio; face] · W_K`, `V_af = [audio; face] · W_V`.
pub fn audio_face_kv<T: Scalar>(
    stream: &IdentityStream<T>,
    weights: &AfcaWeights<T>,
) -> Result<(Array2<T>, Array2<T>), CoreError> {
    let (_, k, v) = kv_with_concat(stream, weights)?;
    Ok((k, v))
}

/// Temporally masked multi-head cross attention of the video grid over
/// precomputed audio-face keys/values; output is `(N, d_model)` in grid
/// flatten order.
pub fn masked_mhca<T: Scalar>(
    query_grid: &VideoTokenGrid<T>,
    k_af: &Array2<T>,
    v_af: &Array2<T>,
    temporal_mask: &TemporalAttentionMask,
    weights: &AfcaWeights<T>,
) -> Result<Array2<T>, CoreError> {
    let h_flat = query_grid.flatten();
    let (out, _) = grad::mhca_cached(&h_flat, query_grid.meta(), k_af, v_af, temporal_mask, weights)?;
    Ok(out)
}

/// One identity's attention contribution, gated row-wise by its token mask.
pub fn afca_forward<T: Scalar>(
    h: &Array2<T>,
    meta: GridMeta,
    stream: &IdentityStream<T>,
    weights: &AfcaWeights<T>,
    token_mask: &TokenMask<T>,
) -> Result<Array2<T>, CoreError> {
    let (out, _) = grad::afca_cached(h, meta, stream, weights, token_mask)?;
    Ok(out)
}

/// Sum the gated contributions of every identity onto `h_in`, with queries
/// for all identities taken from the same `h_in` and one shared weight set:
/// `H_out = H_in + Σ_k gate_k ⊙ MHCA_k(H_in)`.
pub fn aggregate_gated<T: Scalar>(
    h_in: &Array2<T>,
    meta: GridMeta,
    streams: &[(&IdentityStream<T>, &TokenMask<T>)],
    weights: &AfcaWeights<T>,
) -> Result<Array2<T>, CoreError> {
    let (out, _) = grad::aggregate_cached(h_in, meta, streams, weights)?;
    Ok(out)
}

/// [`aggregate_gated`] with each identity's token mask derived from its
/// pixel-space face box on the grid implied by `patch` and `pad`.
pub fn aggregate_identities<T: Scalar>(
    h_in: &Array2<T>,
    meta: GridMeta,
    streams: &[IdentityStream<T>],
    weights: &AfcaWeights<T>,
    patch: PatchSpec,
    pad: PadPolicy,
) -> Result<Array2<T>, CoreError> {
    let masks: Vec<TokenMask<T>> = streams
        .iter()
        .map(|s| {
            let tm = token_mask_from_bbox::<T>(&s.pixel_mask, meta.t_lat, patch, pad)?;
            if tm.meta() != meta {
                return Err(ShapeError::new(
                    "identity aggregation",
                    format!(
                        "identity '{}': face box grid {}x{} does not match token grid {}x{}",
                        s.identity_id,
                        tm.meta().rows,
                        tm.meta().cols,
                        meta.rows,
                        meta.cols
                    ),
                )
                .into());
            }
            Ok(tm)
        })
        .collect::<Result<_, CoreError>>()?;
    let pairs: Vec<(&IdentityStream<T>, &TokenMask<T>)> =
        streams.iter().zip(masks.iter()).collect();
    aggregate_gated(h_in, meta, &pairs, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Bbox, FrameDims};
    use crate::rng::stream as rng_stream;
    use crate::testutil::{dense_attention_oracle, max_abs_diff, randn2};
    use ndarray::{arr2, Array1, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn full_frame_mask(meta: GridMeta) -> TokenMask<f64> {
        TokenMask::from_frame_values(
            Array1::ones(meta.tokens_per_frame()),
            meta.t_lat,
            meta.rows,
            meta.cols,
        )
        .unwrap()
    }

    fn zero_mask(meta: GridMeta) -> TokenMask<f64> {
        TokenMask::from_frame_values(
            Array1::zeros(meta.tokens_per_frame()),
            meta.t_lat,
            meta.rows,
            meta.cols,
        )
        .unwrap()
    }

    fn any_pixel_mask() -> PixelMask {
        PixelMask::new(
            Bbox::new(0, 0, 8, 8).unwrap(),
            FrameDims::new(8, 8).unwrap(),
        )
        .unwrap()
    }

    fn random_stream(
        rng: &mut impl rand::Rng,
        id: &str,
        a: usize,
        f: usize,
        d_af: usize,
    ) -> IdentityStream<f64> {
        IdentityStream::new(
            AudioTokenStream::new(randn2(rng, a, d_af), id).unwrap(),
            FaceTokens::new(randn2(rng, f, d_af), id).unwrap(),
            any_pixel_mask(),
        )
        .unwrap()
    }

    fn random_weights(
        rng: &mut impl rand::Rng,
        d_model: usize,
        d_af: usize,
        d_k: usize,
        d_v: usize,
        heads: usize,
    ) -> AfcaWeights<f64> {
        AfcaWeights::random(d_model, d_af, d_k, d_v, heads, rng).unwrap()
    }

    // -- temporal mask ------------------------------------------------------

    #[test]
    fn one_frame_sees_everything() {
        let m = build_temporal_mask(1, 5, 1).unwrap();
        assert_eq!(m.allow().dim(), (1, 6));
        assert!(m.allow().iter().all(|a| *a));
    }

    #[test]
    fn three_frame_windows_enumerated() {
        let m = build_temporal_mask(3, 8, 1).unwrap();
        let row = |t: usize| -> Vec<bool> { m.allow().row(t).to_vec() };
        assert_eq!(
            row(0),
            vec![true, true, true, true, true, true, true, true, true]
        );
        assert_eq!(
            row(1),
            vec![true, true, true, true, false, false, false, false, true]
        );
        assert_eq!(
            row(2),
            vec![false, false, false, false, true, true, true, true, true]
        );
    }

    #[test]
    fn audio_shortfall_names_required_minimum() {
        let err = build_temporal_mask(3, 7, 1).unwrap_err();
        assert!(err.to_string().contains("requires A >= 8"), "{err}");
    }

    proptest! {
        #[test]
        fn temporal_mask_invariants(
            t_lat in 1usize..=8,
            f in 0usize..=2,
            surplus in 0usize..=12,
        ) {
            let a = (AUDIO_TOKENS_PER_FRAME * (t_lat - 1) + surplus).max(1);
            let m = build_temporal_mask(t_lat, a, f).unwrap();
            prop_assert_eq!(m.allow().dim(), (t_lat, a + f));
            // Frame 0 sees all audio; face columns visible everywhere.
            prop_assert!(m.allow().row(0).iter().all(|x| *x));
            for t in 0..t_lat {
                for j in a..a + f {
                    prop_assert!(m.allow()[(t, j)]);
                }
            }
            // Later frames see exactly their window.
            for t in 1..t_lat {
                let lo = AUDIO_TOKENS_PER_FRAME * (t - 1);
                let hi = (AUDIO_TOKENS_PER_FRAME * t).min(a);
                for j in 0..a {
                    prop_assert_eq!(m.allow()[(t, j)], (lo..hi).contains(&j));
                }
            }
        }
    }

    // -- kv assembly --------------------------------------------------------

    #[test]
    fn identity_projection_passes_tokens_through() {
        let audio = AudioTokenStream::new(arr2(&[[1.0, 0.0]]), "a").unwrap();
        let face = FaceTokens::new(arr2(&[[0.0, 1.0]]), "a").unwrap();
        let stream = IdentityStream::new(audio, face, any_pixel_mask()).unwrap();
        let eye = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let weights = AfcaWeights::new(
            Array2::ones((4, 2)),
            eye.clone(),
            eye,
            Array2::ones((2, 4)),
            1,
        )
        .unwrap();
        let (k, v) = audio_face_kv(&stream, &weights).unwrap();
        assert_eq!(k, arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(v, arr2(&[[1.0, 0.0], [0.0, 1.0]]));
    }

    #[test]
    fn kv_shapes_follow_token_counts() {
        let mut rng = rng_stream(1, "afca-kv-shapes");
        let stream = random_stream(&mut rng, "a", 4, 1, 8);
        let weights = random_weights(&mut rng, 6, 8, 8, 8, 2);
        let (k, v) = audio_face_kv(&stream, &weights).unwrap();
        assert_eq!(k.dim(), (5, 16));
        assert_eq!(v.dim(), (5, 16));
    }

    #[test]
    fn zero_tokens_project_to_zero() {
        let mut rng = rng_stream(2, "afca-kv-zero");
        let audio = AudioTokenStream::new(Array2::zeros((3, 4)), "a").unwrap();
        let face = FaceTokens::new(Array2::zeros((1, 4)), "a").unwrap();
        let stream = IdentityStream::new(audio, face, any_pixel_mask()).unwrap();
        let weights = random_weights(&mut rng, 6, 4, 3, 5, 1);
        let (k, v) = audio_face_kv(&stream, &weights).unwrap();
        assert!(k.iter().all(|x| *x == 0.0));
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn channel_mismatch_names_both_dims() {
        let mut rng = rng_stream(3, "afca-kv-mismatch");
        let stream = random_stream(&mut rng, "a", 4, 1, 8);
        let weights = random_weights(&mut rng, 6, 5, 4, 4, 2);
        let err = audio_face_kv(&stream, &weights).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('8') && msg.contains('5'), "{msg}");
    }

    // -- masked attention ---------------------------------------------------

    #[test]
    fn single_key_output_is_projected_value_row() {
        let mut rng = rng_stream(4, "afca-single-key");
        // One query token, one audio key, no face token columns.
        let grid = VideoTokenGrid::new(ndarray::Array4::from_shape_fn((1, 1, 1, 4), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        }))
        .unwrap();
        let weights = random_weights(&mut rng, 4, 3, 2, 2, 2);
        let k_af = randn2::<f64>(&mut rng, 1, 4);
        let v_af = randn2::<f64>(&mut rng, 1, 4);
        let tmask = build_temporal_mask(1, 1, 0).unwrap();
        let out = masked_mhca(&grid, &k_af, &v_af, &tmask, &weights).unwrap();
        let expected = v_af.dot(&weights.w_o);
        assert!(max_abs_diff(&out, &expected) < 1e-12);
    }

    #[test]
    fn out_of_window_audio_cannot_leak() {
        let mut rng = rng_stream(5, "afca-leak");
        let meta = GridMeta::new(3, 2, 2).unwrap();
        let grid = VideoTokenGrid::new(ndarray::Array4::from_shape_fn(
            (3, 2, 2, 6),
            |_| rng.sample::<f64, _>(rand_distr::StandardNormal),
        ))
        .unwrap();
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let tmask = build_temporal_mask(3, 8, 1).unwrap();
        let k_af = randn2::<f64>(&mut rng, 9, 3);
        let mut v_af = randn2::<f64>(&mut rng, 9, 3);

        let base = masked_mhca(&grid, &k_af, &v_af, &tmask, &weights).unwrap();
        // Poison audio token 7: visible to frames 0 and 2, not frame 1.
        v_af.row_mut(7).fill(1e6);
        let poisoned = masked_mhca(&grid, &k_af, &v_af, &tmask, &weights).unwrap();

        let per = meta.tokens_per_frame();
        for n in 0..meta.n_tokens() {
            let frame = meta.frame_of(n);
            let changed = base.row(n) != poisoned.row(n);
            assert_eq!(changed, frame != 1, "token {n} in frame {frame}");
        }
        assert_eq!(per, 4);
    }

    #[test]
    fn matches_dense_oracle_on_expanded_mask() {
        for seed in 0..10u64 {
            let mut rng = rng_stream(seed, "afca-mhca-oracle");
            let t_lat = 1 + (seed as usize % 3);
            let meta = GridMeta::new(t_lat, 2, 2).unwrap();
            let a = AUDIO_TOKENS_PER_FRAME * (t_lat - 1) + 1 + (seed as usize % 5);
            let f = 1 + (seed as usize % 2);
            let grid = VideoTokenGrid::new(ndarray::Array4::from_shape_fn(
                (t_lat, 2, 2, 4),
                |_| rng.sample::<f64, _>(rand_distr::StandardNormal),
            ))
            .unwrap();
            let weights = random_weights(&mut rng, 4, 5, 2, 2, 2);
            let tmask = build_temporal_mask(t_lat, a, f).unwrap();
            let k_af = randn2::<f64>(&mut rng, a + f, 4);
            let v_af = randn2::<f64>(&mut rng, a + f, 4);

            let out = masked_mhca(&grid, &k_af, &v_af, &tmask, &weights).unwrap();

            let q = grid.flatten().dot(&weights.w_q);
            let allow = tmask.expand(meta).unwrap();
            let oracle = dense_attention_oracle(&q, &k_af, &v_af, 2, Some(&allow)).dot(&weights.w_o);
            assert!(max_abs_diff(&out, &oracle) < 1e-9, "seed {seed}");
        }
    }

    // -- gating -------------------------------------------------------------

    #[test]
    fn zero_gate_annihilates_output() {
        let mut rng = rng_stream(6, "afca-zero-gate");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let stream = random_stream(&mut rng, "a", 8, 1, 4);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let out = afca_forward(&h, meta, &stream, &weights, &zero_mask(meta)).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn unit_gate_reduces_to_masked_attention() {
        let mut rng = rng_stream(7, "afca-unit-gate");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let stream = random_stream(&mut rng, "a", 8, 1, 4);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let gated = afca_forward(&h, meta, &stream, &weights, &full_frame_mask(meta)).unwrap();

        let grid = VideoTokenGrid::unflatten(h, meta).unwrap();
        let (k, v) = audio_face_kv(&stream, &weights).unwrap();
        let tmask = build_temporal_mask(meta.t_lat, 8, 1).unwrap();
        let plain = masked_mhca(&grid, &k, &v, &tmask, &weights).unwrap();
        assert_eq!(gated, plain);
    }

    #[test]
    fn indicator_gate_zeroes_exactly_the_complement() {
        let mut rng = rng_stream(8, "afca-indicator");
        // N = 8 via a single latent frame so the gate pattern is free.
        let meta = GridMeta::new(1, 2, 4).unwrap();
        let h = randn2::<f64>(&mut rng, 8, 6);
        let stream = random_stream(&mut rng, "a", 5, 1, 4);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let mut frame = Array1::zeros(8);
        frame[2] = 1.0;
        frame[5] = 1.0;
        let mask = TokenMask::from_frame_values(frame, 1, 2, 4).unwrap();

        let gated = afca_forward(&h, meta, &stream, &weights, &mask).unwrap();
        let full = afca_forward(&h, meta, &stream, &weights, &full_frame_mask(meta)).unwrap();
        for n in 0..8 {
            if n == 2 || n == 5 {
                assert_eq!(gated.row(n), full.row(n));
            } else {
                assert!(gated.row(n).iter().all(|x| *x == 0.0));
            }
        }
    }

    #[test]
    fn wrong_gate_length_rejected() {
        let mut rng = rng_stream(9, "afca-gate-len");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let stream = random_stream(&mut rng, "a", 8, 1, 4);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let short = full_frame_mask(GridMeta::new(2, 2, 1).unwrap());
        assert!(afca_forward(&h, meta, &stream, &weights, &short).is_err());
    }

    // -- aggregation --------------------------------------------------------

    #[test]
    fn empty_stream_list_is_identity() {
        let mut rng = rng_stream(10, "afca-empty");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let out = aggregate_gated(&h, meta, &[], &weights).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn single_stream_reduces_to_residual_plus_attention() {
        let mut rng = rng_stream(11, "afca-single");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let stream = random_stream(&mut rng, "a", 8, 1, 4);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let mask = full_frame_mask(meta);
        let agg = aggregate_gated(&h, meta, &[(&stream, &mask)], &weights).unwrap();
        let single = afca_forward(&h, meta, &stream, &weights, &mask).unwrap();
        assert_eq!(agg, &h + &single);
    }

    #[test]
    fn stream_order_does_not_matter() {
        let mut rng = rng_stream(12, "afca-perm");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 2);
        let s0 = random_stream(&mut rng, "a", 8, 1, 4);
        let s1 = random_stream(&mut rng, "b", 9, 1, 4);
        let s2 = random_stream(&mut rng, "c", 12, 1, 4);
        let mask = full_frame_mask(meta);
        let fwd = aggregate_gated(
            &h,
            meta,
            &[(&s0, &mask), (&s1, &mask), (&s2, &mask)],
            &weights,
        )
        .unwrap();
        let rev = aggregate_gated(
            &h,
            meta,
            &[(&s2, &mask), (&s1, &mask), (&s0, &mask)],
            &weights,
        )
        .unwrap();
        assert!(max_abs_diff(&fwd, &rev) <= 1e-6);
    }

    #[test]
    fn null_gated_stream_contributes_exactly_nothing() {
        let mut rng = rng_stream(13, "afca-null");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let live = random_stream(&mut rng, "a", 8, 1, 4);
        let silent = random_stream(&mut rng, "b", 8, 1, 4);
        let mask = full_frame_mask(meta);
        let null = zero_mask(meta);
        let with = aggregate_gated(&h, meta, &[(&live, &mask), (&silent, &null)], &weights).unwrap();
        let without = aggregate_gated(&h, meta, &[(&live, &mask)], &weights).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn disjoint_gates_localize_each_identity() {
        let mut rng = rng_stream(14, "afca-disjoint");
        let meta = GridMeta::new(2, 1, 4).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let left = random_stream(&mut rng, "a", 8, 1, 4);
        let right = random_stream(&mut rng, "b", 8, 1, 4);
        let left_mask =
            TokenMask::from_frame_values(ndarray::arr1(&[1.0, 1.0, 0.0, 0.0]), 2, 1, 4).unwrap();
        let right_mask =
            TokenMask::from_frame_values(ndarray::arr1(&[0.0, 0.0, 1.0, 1.0]), 2, 1, 4).unwrap();

        let base = aggregate_gated(
            &h,
            meta,
            &[(&left, &left_mask), (&right, &right_mask)],
            &weights,
        )
        .unwrap();

        // Perturb the right identity; rows gated to the left identity must
        // not move at all.
        let mut right_perturbed = right.clone();
        right_perturbed.audio.tokens += 0.5;
        right_perturbed.face.tokens -= 0.25;
        let moved = aggregate_gated(
            &h,
            meta,
            &[(&left, &left_mask), (&right_perturbed, &right_mask)],
            &weights,
        )
        .unwrap();

        for n in 0..meta.n_tokens() {
            let col = n % 4;
            if col < 2 {
                assert_eq!(base.row(n), moved.row(n), "left-gated row {n} moved");
            } else {
                assert_ne!(base.row(n), moved.row(n), "right-gated row {n} frozen");
            }
        }
    }

    #[test]
    fn duplicate_identity_rejected() {
        let mut rng = rng_stream(15, "afca-dup");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);
        let s0 = random_stream(&mut rng, "a", 8, 1, 4);
        let s1 = random_stream(&mut rng, "a", 9, 1, 4);
        let mask = full_frame_mask(meta);
        let err = aggregate_gated(&h, meta, &[(&s0, &mask), (&s1, &mask)], &weights).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn identity_count_scales_without_branching() {
        let mut rng = rng_stream(16, "afca-scale");
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 2);
        let mask = full_frame_mask(meta);
        for n in [1usize, 2, 3, 4, 8] {
            let streams: Vec<IdentityStream<f64>> = (0..n)
                .map(|i| random_stream(&mut rng, &format!("id{i}"), 8, 1, 4))
                .collect();
            let pairs: Vec<(&IdentityStream<f64>, &TokenMask<f64>)> =
                streams.iter().map(|s| (s, &mask)).collect();
            let out = aggregate_gated(&h, meta, &pairs, &weights).unwrap();
            assert_eq!(out.dim(), h.dim());
            assert!(out.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn pixel_masks_lower_to_the_gated_form() {
        let mut rng = rng_stream(17, "afca-pixel");
        // 8x8 frame, 4x4 patches: a 2x2 token frame.
        let meta = GridMeta::new(2, 2, 2).unwrap();
        let patch = PatchSpec::new(4, 4).unwrap();
        let h = randn2::<f64>(&mut rng, meta.n_tokens(), 6);
        let weights = random_weights(&mut rng, 6, 4, 3, 3, 1);

        let mut left = random_stream(&mut rng, "a", 8, 1, 4);
        left.pixel_mask = PixelMask::new(
            Bbox::new(0, 0, 4, 8).unwrap(),
            FrameDims::new(8, 8).unwrap(),
        )
        .unwrap();
        let mut right = random_stream(&mut rng, "b", 8, 1, 4);
        right.pixel_mask = PixelMask::new(
            Bbox::new(4, 0, 8, 8).unwrap(),
            FrameDims::new(8, 8).unwrap(),
        )
        .unwrap();

        let high = aggregate_identities(
            &h,
            meta,
            &[left.clone(), right.clone()],
            &weights,
            patch,
            PadPolicy::Strict,
        )
        .unwrap();

        let lm = token_mask_from_bbox::<f64>(&left.pixel_mask, 2, patch, PadPolicy::Strict).unwrap();
        let rm =
            token_mask_from_bbox::<f64>(&right.pixel_mask, 2, patch, PadPolicy::Strict).unwrap();
        let low = aggregate_gated(&h, meta, &[(&left, &lm), (&right, &rm)], &weights).unwrap();
        assert_eq!(high, low);
    }
}
