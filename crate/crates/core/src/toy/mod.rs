//! A miniature denoising transformer that wires the audio-face attention
//! into a conventional block stack, small enough to gradient-check and
//! train on a desktop in seconds.
//!
//! The stack is diffusion-style: video tokens plus text, reference, and
//! per-identity audio-face conditioning go in; a noise estimate comes out.
//! Block layout: one pre-norm feeds self-, text-, and reference
//! attention, the audio-face attention queries the raw block input, and
//! all four residual branches add before the feed-forward sublayer. The
//! alternative (running audio-face attention after the other branches,
//! sequentially) would see queries already shifted by self-attention; the
//! parallel-additive form keeps every branch reading the same state.

mod blocks;
mod encoder;
mod sample;
mod train;
mod weights;

pub use blocks::{hidden_states, model_backward, model_forward, ModelCache, ModelGrads};
pub use encoder::{encode_inputs, SyntheticEncoder};
pub use sample::{cfg_sample, guided_prediction, unconditional_inputs};
pub use train::{
    run_two_stage, run_two_stage_from, synthetic_singles, training_step, two_stage_schedule, AdamW,
    DiffusionSchedule, Stage, StagePlan, StepRecord, TrainLog, TrainState,
};
pub use weights::{BlockWeights, Ffn, LayerNorm, ModelWeights, ProjAttn, TensorMut, TensorRef, TimeMlp};

use serde::{Deserialize, Serialize};

use crate::afca::IdentityStream;
use crate::augment::latent_frame_count;
use crate::error::{CoreError, ValidationError};
use crate::grid::{GridMeta, VideoTokenGrid};
use crate::mask::{PadPolicy, PatchSpec, TokenMask};
use crate::scalar::Scalar;
use ndarray::Array2;

/// Model and training hyperparameters. Defaults describe the desk-scale
/// configuration used throughout the tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDiTConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_af: usize,
    pub d_ff: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub frame_count: usize,
    pub l_text: usize,
    pub l_ref: usize,
    pub l_face: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cfg_scale: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub warmup_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            d_model: 32,
            heads: 4,
            d_af: 16,
            d_ff: 128,
            patch_h: 96,
            patch_w: 104,
            frame_count: 13,
            l_text: 512,
            l_ref: 4,
            l_face: 4,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
            cfg_scale: 4.0,
            lr_stage1: 2e-5,
            lr_stage2: 5e-6,
            warmup_steps: 10,
            stage1_steps: 120,
            stage2_steps: 80,
            batch_size: 4,
        }
    }
}

impl ToyDiTConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let positives = [
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_af", self.d_af),
            ("d_ff", self.d_ff),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("frame_count", self.frame_count),
            ("l_text", self.l_text),
            ("l_ref", self.l_ref),
            ("l_face", self.l_face),
            ("diffusion_steps", self.diffusion_steps),
            ("batch_size", self.batch_size),
        ];
        for (name, value) in positives {
            if value == 0 {
                return Err(ValidationError::new("config", format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(ValidationError::new(
                "config",
                format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.cfg_scale < 0.0 || !self.cfg_scale.is_finite() {
            return Err(ValidationError::new("config", "cfg_scale must be finite and >= 0"));
        }
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(ValidationError::new(
                "config",
                format!("betas must satisfy 0 < {} < {} < 1", self.beta_start, self.beta_end),
            ));
        }
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(ValidationError::new("config", format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn t_lat(&self) -> usize {
        latent_frame_count(self.frame_count)
    }

    pub fn patch(&self) -> Result<PatchSpec, ValidationError> {
        PatchSpec::new(self.patch_h, self.patch_w)
    }
}

/// Everything one denoising call conditions on, plus the clean latent the
/// training loop noises. Token masks are precomputed against the latent
/// grid, one per identity stream.
#[derive(Debug, Clone)]
pub struct ModelInputs<T: Scalar> {
    pub latent: VideoTokenGrid<T>,
    pub f_text: Array2<T>,
    pub f_ref: Array2<T>,
    pub streams: Vec<IdentityStream<T>>,
    pub token_masks: Vec<TokenMask<T>>,
}

impl<T: Scalar> ModelInputs<T> {
    pub fn new(
        latent: VideoTokenGrid<T>,
        f_text: Array2<T>,
        f_ref: Array2<T>,
        streams: Vec<IdentityStream<T>>,
        token_masks: Vec<TokenMask<T>>,
        l_text: usize,
    ) -> Result<Self, CoreError> {
        let d_model = latent.d_model();
        if f_text.nrows() != l_text {
            return Err(ValidationError::new(
                "model inputs",
                format!("text has {} rows; the contract is exactly {l_text}", f_text.nrows()),
            )
            .into());
        }
        if f_text.ncols() != d_model || f_ref.ncols() != d_model {
            return Err(ValidationError::new(
                "model inputs",
                format!(
                    "text ({}) and reference ({}) channels must equal d_model {d_model}",
                    f_text.ncols(),
                    f_ref.ncols()
                ),
            )
            .into());
        }
        if f_ref.nrows() == 0 {
            return Err(ValidationError::new("model inputs", "reference needs at least one row").into());
        }
        if streams.len() != token_masks.len() {
            return Err(ValidationError::new(
                "model inputs",
                format!("{} streams but {} token masks", streams.len(), token_masks.len()),
            )
            .into());
        }
        let meta = latent.meta();
        for mask in &token_masks {
            if mask.meta() != meta {
                return Err(ValidationError::new(
                    "model inputs",
                    "token mask grid disagrees with the latent grid",
                )
                .into());
            }
        }
        Ok(Self {
            latent,
            f_text,
            f_ref,
            streams,
            token_masks,
        })
    }

    pub fn meta(&self) -> GridMeta {
        self.latent.meta()
    }

    /// Stream and mask pairs in the layout the aggregation expects.
    pub fn stream_pairs(&self) -> Vec<(&IdentityStream<T>, &TokenMask<T>)> {
        self.streams.iter().zip(&self.token_masks).collect()
    }
}

/// Derive one token mask per stream from its pixel mask, against `meta`.
pub fn masks_for_streams<T: Scalar>(
    streams: &[IdentityStream<T>],
    meta: GridMeta,
    patch: PatchSpec,
) -> Result<Vec<TokenMask<T>>, CoreError> {
    streams
        .iter()
        .map(|s| {
            let mask = crate::mask::token_mask_from_bbox(
                &s.pixel_mask,
                meta.t_lat,
                patch,
                PadPolicy::Strict,
            )?;
            if mask.meta() != meta {
                return Err(ValidationError::new(
                    "model inputs",
                    format!(
                        "stream '{}' rasterizes to grid {:?}, latent grid is {:?}",
                        s.identity_id,
                        mask.meta(),
                        meta
                    ),
                )
                .into());
            }
            Ok(mask)
        })
        .collect()
}

/// Standard-normal matrix draw; the shared primitive behind synthetic
/// embeddings, training noise, and sampling initialization.
pub(crate) fn randn_matrix<T: Scalar>(
    rng: &mut impl rand::Rng,
    rows: usize,
    cols: usize,
) -> Array2<T> {
    use crate::scalar::lit;
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        lit::<T>(x)
    })
}

/// Config plus parameters: the unit that trains, samples, and checkpoints.
#[derive(Debug, Clone)]
pub struct ToyModel<T: Scalar> {
    pub config: ToyDiTConfig,
    pub weights: ModelWeights<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Fresh model with seeded random initialization.
    pub fn init(config: ToyDiTConfig, seed: u64) -> Result<Self, CoreError> {
        config.validate()?;
        let weights = ModelWeights::random(&config, &mut crate::rng::stream(seed, "toy-init"));
        Ok(Self { config, weights })
    }

    /// Same shapes, all parameters zero.
    pub fn zeros(config: ToyDiTConfig) -> Result<Self, CoreError> {
        config.validate()?;
        let weights = ModelWeights::zeros(&config);
        Ok(Self { config, weights })
    }
}
