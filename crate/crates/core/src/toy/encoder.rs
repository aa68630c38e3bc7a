//! Deterministic stand-ins for the frozen text, reference, and face
//! encoders: content-addressed pseudo-random embeddings. The same seed
//! and the same content always produce the same arrays, which is all the
//! conditioning path needs for tests.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::afca::{AudioTokenStream, FaceTokens, IdentityStream};
use crate::augment::{latent_frame_count, ClipSample};
use crate::error::{CoreError, ValidationError};
use crate::grid::{GridMeta, VideoTokenGrid};
use crate::mask::{global_face_bbox, token_grid_dims, PadPolicy};
use crate::rng::keyed_stream;
use crate::scalar::{lit, Scalar};

use super::{masks_for_streams, randn_matrix, ModelInputs, ToyDiTConfig};

/// Seeded embedding factory.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    pub seed: u64,
    pub config: ToyDiTConfig,
}

impl SyntheticEncoder {
    pub fn new(seed: u64, config: ToyDiTConfig) -> Result<Self, ValidationError> {
        config.validate()?;
        Ok(Self { seed, config })
    }

    fn keyed_row<T: Scalar>(&self, purpose: &'static str, key: &str, dim: usize) -> Vec<T> {
        let mut rng = keyed_stream(self.seed, purpose, key);
        (0..dim)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                lit::<T>(x)
            })
            .collect()
    }

    /// Whitespace pseudo-tokens, embedded per token, padded or truncated
    /// to exactly `l_text` rows with one designated pad row.
    pub fn encode_text<T: Scalar>(&self, text: &str) -> Array2<T> {
        let d = self.config.d_model;
        let l = self.config.l_text;
        let pad = self.keyed_row::<T>("text-pad", "", d);
        let mut out = Array2::zeros((l, d));
        let mut rows = 0;
        for token in text.split_whitespace().take(l) {
            let row = self.keyed_row::<T>("text-token", token, d);
            for (c, v) in row.into_iter().enumerate() {
                out[(rows, c)] = v;
            }
            rows += 1;
        }
        for r in rows..l {
            for c in 0..d {
                out[(r, c)] = pad[c];
            }
        }
        out
    }

    /// `l_ref` reference rows per identity, concatenated in speaker
    /// order.
    pub fn encode_reference<T: Scalar>(&self, identity_ids: &[&str]) -> Array2<T> {
        let d = self.config.d_model;
        let l = self.config.l_ref;
        let mut out = Array2::zeros((l * identity_ids.len().max(1), d));
        if identity_ids.is_empty() {
            let row = self.keyed_row::<T>("ref", "", d);
            for c in 0..d {
                out[(0, c)] = row[c];
            }
            return out;
        }
        for (i, id) in identity_ids.iter().enumerate() {
            for r in 0..l {
                let row = self.keyed_row::<T>("ref", &format!("{id}|{r}"), d);
                for c in 0..d {
                    out[(i * l + r, c)] = row[c];
                }
            }
        }
        out
    }

    /// `l_face` appearance tokens for one identity, in the audio-face
    /// channel width.
    pub fn encode_face<T: Scalar>(&self, identity_id: &str) -> Array2<T> {
        let d = self.config.d_af;
        let l = self.config.l_face;
        let mut out = Array2::zeros((l, d));
        for r in 0..l {
            let row = self.keyed_row::<T>("face", &format!("{identity_id}|{r}"), d);
            for c in 0..d {
                out[(r, c)] = row[c];
            }
        }
        out
    }

    /// Pseudo clean latent for a clip, keyed by its content summary.
    pub fn encode_latent<T: Scalar>(&self, clip: &ClipSample<T>) -> Result<VideoTokenGrid<T>, CoreError> {
        let patch = self.config.patch()?;
        let (rows, cols) = token_grid_dims(clip.frame_dims, patch, PadPolicy::Strict)?;
        let t_lat = latent_frame_count(clip.frame_count);
        let meta = GridMeta::new(t_lat, rows, cols)?;
        let ids: Vec<&str> = clip.speakers.iter().map(|s| s.identity_id.as_str()).collect();
        let key = format!(
            "{}|{}|{}x{}|{}",
            clip.text,
            ids.join("+"),
            clip.frame_dims.h_px,
            clip.frame_dims.w_px,
            clip.frame_count
        );
        let mut rng = keyed_stream(self.seed, "latent", &key);
        let flat = randn_matrix::<T>(&mut rng, meta.n_tokens(), self.config.d_model);
        let data = Array4::from_shape_vec(
            (t_lat, rows, cols, self.config.d_model),
            flat.into_raw_vec_and_offset().0,
        )
        .expect("token count matches grid");
        Ok(VideoTokenGrid::new(data)?)
    }
}

/// Assemble everything one denoising call needs from a clip: pseudo
/// latent, text and reference embeddings, one identity stream per
/// speaker, and token masks rasterized from the face tracks.
pub fn encode_inputs<T: Scalar>(
    clip: &ClipSample<T>,
    enc: &SyntheticEncoder,
) -> Result<ModelInputs<T>, CoreError> {
    let cfg = &enc.config;
    for sp in &clip.speakers {
        if sp.audio.ncols() != cfg.d_af {
            return Err(ValidationError::new(
                "encode inputs",
                format!(
                    "speaker '{}' audio has {} channels, config d_af is {}",
                    sp.identity_id,
                    sp.audio.ncols(),
                    cfg.d_af
                ),
            )
            .into());
        }
    }
    let latent = enc.encode_latent(clip)?;
    let meta = latent.meta();
    let f_text = enc.encode_text::<T>(&clip.text);
    let ids: Vec<&str> = clip.speakers.iter().map(|s| s.identity_id.as_str()).collect();
    let f_ref = enc.encode_reference::<T>(&ids);
    let mut streams = Vec::with_capacity(clip.speakers.len());
    for sp in &clip.speakers {
        let audio = AudioTokenStream::new(sp.audio.clone(), sp.identity_id.clone())?;
        let face = FaceTokens::new(enc.encode_face::<T>(&sp.identity_id), sp.identity_id.clone())?;
        let pixel_mask = global_face_bbox(&sp.face_track)?;
        streams.push(IdentityStream::new(audio, face, pixel_mask)?);
    }
    let token_masks = masks_for_streams(&streams, meta, enc.config.patch()?)?;
    ModelInputs::new(latent, f_text, f_ref, streams, token_masks, cfg.l_text)
}
