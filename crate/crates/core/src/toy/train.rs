//! Denoising training loop: diffusion schedule, AdamW, and the two-stage plan.
//!
//! Stage one mixes single-speaker batches with concatenated two-speaker
//! batches on a fair coin; stage two trains on concatenated pairs only, at a
//! lower learning rate with a linear warm-up. The optimizer pairs weights
//! with gradients through the shared named-tensor walk, so moment buffers
//! stay aligned by construction.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::afca::AUDIO_TOKENS_PER_FRAME;
use crate::augment::{
    hconcat_pair, select_batch_mode, BatchMode, ClipSample, ClipSpeaker, CROP_H, CROP_W,
    DEFAULT_FPS,
};
use crate::error::{CoreError, ValidationError};
use crate::mask::{Bbox, FaceTrack, FrameDims};
use crate::rng::keyed_stream;
use crate::scalar::{lit, Scalar};

use super::{
    encode_inputs, model_backward, model_forward, randn_matrix, ModelInputs, ModelWeights,
    SyntheticEncoder, ToyDiTConfig, ToyModel,
};

// ---------------------------------------------------------------------------
// Diffusion schedule
// ---------------------------------------------------------------------------

/// Linear-beta variance schedule with cached cumulative alpha products.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ValidationError> {
        if steps == 0 {
            return Err(ValidationError::new("diffusion schedule", "zero steps"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ValidationError::new(
                "diffusion schedule",
                format!("betas must satisfy 0 < {beta_start} <= {beta_end} < 1"),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn from_config(config: &ToyDiTConfig) -> Result<Self, ValidationError> {
        Self::linear(config.diffusion_steps, config.beta_start, config.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative product of (1 - beta) through timestep `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Forward-noises `x0` to timestep `t`:
    /// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
    pub fn noised<T: Scalar>(&self, x0: &Array2<T>, eps: &Array2<T>, t: usize) -> Array2<T> {
        let ab = self.alpha_bars[t];
        let signal = lit::<T>(ab.sqrt());
        let noise = lit::<T>((1.0 - ab).sqrt());
        x0.mapv(|v| v * signal) + eps.mapv(|v| v * noise)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Decoupled weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moment buffers for one tensor, kept in f64 so the
/// optimizer math stays in double precision even for f32 models.
#[derive(Debug, Clone, PartialEq)]
struct MomentPair {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Training stage: single-speaker pretraining or two-speaker refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Single,
    Multi,
}

/// Mutable training bundle: model, schedule, optimizer state, progress.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: ToyModel<T>,
    pub schedule: DiffusionSchedule,
    pub opt: AdamW,
    pub stage: Stage,
    /// Completed optimizer updates; doubles as the Adam bias-correction step.
    pub step: usize,
    moments: BTreeMap<String, MomentPair>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: ToyModel<T>) -> Result<Self, ValidationError> {
        let schedule = DiffusionSchedule::from_config(&model.config)?;
        Ok(Self {
            model,
            schedule,
            opt: AdamW::default(),
            stage: Stage::Single,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// One AdamW update over every tensor, gradients matched by walk order.
    pub fn apply_gradients(&mut self, grads: &ModelWeights<T>, lr: f64) {
        self.step += 1;
        let AdamW { beta1, beta2, eps, weight_decay } = self.opt;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let grad_tensors = grads.tensors();
        for ((name, mut weight), (grad_name, grad)) in
            self.model.weights.tensors_mut().into_iter().zip(grad_tensors)
        {
            debug_assert_eq!(name, grad_name);
            let grad = grad.as_dyn();
            let moments = self
                .moments
                .entry(name)
                .or_insert_with(|| MomentPair { m: vec![0.0; grad.len()], v: vec![0.0; grad.len()] });
            let mut weight = weight.as_dyn_mut();
            for ((w, g), (m, v)) in weight
                .iter_mut()
                .zip(grad.iter())
                .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
            {
                let g = g.to_f64().expect("gradient converts to f64");
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let w_f = w.to_f64().expect("weight converts to f64");
                *w = lit::<T>(w_f - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w_f));
            }
        }
    }
}

/// Elementwise sum of two gradient containers, in walk order.
fn accumulate<T: Scalar>(total: &mut ModelWeights<T>, part: &ModelWeights<T>) {
    for ((name, mut dst), (part_name, src)) in total.tensors_mut().into_iter().zip(part.tensors()) {
        debug_assert_eq!(name, part_name);
        dst.as_dyn_mut().zip_mut_with(&src.as_dyn(), |a, b| *a += *b);
    }
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// Samples the denoising timestep and matching noise for one training example.
pub(crate) fn draw_timestep_and_noise<T: Scalar>(
    steps: usize,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> (usize, Array2<T>) {
    let t = rng.gen_range(0..steps);
    let eps = randn_matrix(rng, rows, cols);
    (t, eps)
}

/// One optimizer update on a batch: noise each clean latent at a uniformly
/// drawn timestep, regress the model output onto that noise, step AdamW.
///
/// Returns the batch mean of per-sample mean squared error. A non-finite
/// loss aborts before the weights are touched.
pub fn training_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[ModelInputs<T>],
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64, CoreError> {
    if batch.is_empty() {
        return Err(ValidationError::new("training step", "empty batch").into());
    }
    let mut total = ModelWeights::zeros(&state.model.config);
    let inv_batch = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for inputs in batch {
        let x0 = inputs.latent.flatten();
        let (n, d) = x0.dim();
        let (t, eps) = draw_timestep_and_noise::<T>(state.schedule.len(), n, d, rng);
        let x_t = state.schedule.noised(&x0, &eps, t);
        let (eps_hat, cache) = model_forward(&state.model, inputs, &x_t, t)?;
        let diff = &eps_hat - &eps;
        let count = (n * d) as f64;
        loss_sum += diff
            .iter()
            .map(|v| {
                let f = v.to_f64().expect("loss term converts to f64");
                f * f
            })
            .sum::<f64>()
            / count;
        // d(batch loss)/d(eps_hat) for this sample: 2 diff / (N d B).
        let scale = lit::<T>(2.0 * inv_batch / count);
        let d_eps = diff.mapv(|v| v * scale);
        let grads = model_backward(&state.model, inputs, &cache, &d_eps);
        accumulate(&mut total, &grads.weights);
    }
    let loss = loss_sum * inv_batch;
    if !loss.is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite loss {loss} at optimizer step {} (stage {:?}, lr {lr}, batch of {})",
            state.step + 1,
            state.stage,
            batch.len()
        )));
    }
    state.apply_gradients(&total, lr);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Two-stage plan
// ---------------------------------------------------------------------------

/// Step counts and learning rates for the two-stage run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Linear warm-up length at the start of stage two.
    pub warmup_steps: usize,
}

impl StagePlan {
    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    pub fn stage_of(&self, global_step: usize) -> Stage {
        if global_step < self.stage1_steps {
            Stage::Single
        } else {
            Stage::Multi
        }
    }

    /// Learning rate at a global step: constant through stage one, then a
    /// linear ramp to the stage-two rate over the warm-up window.
    pub fn lr_at(&self, global_step: usize) -> f64 {
        match self.stage_of(global_step) {
            Stage::Single => self.lr_stage1,
            Stage::Multi => {
                let i = global_step - self.stage1_steps;
                if i < self.warmup_steps {
                    self.lr_stage2 * (i + 1) as f64 / self.warmup_steps as f64
                } else {
                    self.lr_stage2
                }
            }
        }
    }
}

/// Builds the stage plan straight off the config.
pub fn two_stage_schedule(config: &ToyDiTConfig) -> StagePlan {
    StagePlan {
        stage1_steps: config.stage1_steps,
        stage2_steps: config.stage2_steps,
        lr_stage1: config.lr_stage1,
        lr_stage2: config.lr_stage2,
        warmup_steps: config.warmup_steps,
    }
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

/// Per-step audit row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub mode: BatchMode,
    pub lr: f64,
    pub loss: f64,
}

/// Full training history, one record per optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Mean loss over the first `window` records.
    pub fn head_mean(&self, window: usize) -> f64 {
        Self::mean(&self.records[..window.min(self.records.len())])
    }

    /// Mean loss over the last `window` records.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let n = self.records.len();
        Self::mean(&self.records[n - window.min(n)..])
    }

    fn mean(records: &[StepRecord]) -> f64 {
        if records.is_empty() {
            return f64::NAN;
        }
        records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Two-stage run
// ---------------------------------------------------------------------------

/// Pairs drawn singles deterministically, (0,1), (2,3), ... in draw order.
/// An odd tail is dropped, mirroring paired-mode selection.
pub(crate) fn assemble_stage2_batch<T: Scalar>(
    drawn: &[ClipSample<T>],
) -> Result<Vec<ClipSample<T>>, CoreError> {
    let mut out = Vec::with_capacity(drawn.len() / 2);
    for pair in drawn.chunks_exact(2) {
        out.push(hconcat_pair(&pair[0], &pair[1])?);
    }
    if out.is_empty() {
        return Err(ValidationError::new(
            "stage two batch",
            "needs at least two drawn samples to pair",
        )
        .into());
    }
    Ok(out)
}

/// Builds a deterministic corpus of distinct-identity single-speaker clips
/// at the canonical crop size, ready for pairing. Audio rows cover every
/// latent frame's attention window; face boxes jitter a few pixels per frame.
pub fn synthetic_singles<T: Scalar>(
    config: &ToyDiTConfig,
    count: usize,
    root_seed: u64,
) -> Result<Vec<ClipSample<T>>, CoreError> {
    config.validate()?;
    let dims = FrameDims::new(CROP_H, CROP_W)?;
    let audio_rows = AUDIO_TOKENS_PER_FRAME * config.t_lat();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = keyed_stream(root_seed, "toy-corpus", &format!("clip-{i}"));
        let audio = randn_matrix::<T>(&mut rng, audio_rows, config.d_af);
        let boxes = (0..config.frame_count)
            .map(|_| {
                let dx = rng.gen_range(0..=16usize);
                let dy = rng.gen_range(0..=16usize);
                Bbox::new(120 + dx, 132 + dy, 280 + dx, 332 + dy)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let identity = format!("spk{i}");
        let track = FaceTrack::new(identity.clone(), dims, boxes)?;
        let speaker = ClipSpeaker { identity_id: identity, audio, face_track: track };
        out.push(ClipSample::new(
            dims,
            config.frame_count,
            DEFAULT_FPS,
            format!("solo take {i}"),
            vec![speaker],
        )?);
    }
    Ok(out)
}

fn validate_corpus<T: Scalar>(
    corpus: &[ClipSample<T>],
    config: &ToyDiTConfig,
) -> Result<(), CoreError> {
    if corpus.len() < config.batch_size {
        return Err(ValidationError::new(
            "two-stage run",
            format!("corpus of {} cannot fill batches of {}", corpus.len(), config.batch_size),
        )
        .into());
    }
    if config.stage2_steps > 0 && config.batch_size < 2 {
        return Err(ValidationError::new(
            "two-stage run",
            "stage two pairs samples, so batch_size must be at least 2",
        )
        .into());
    }
    let mut seen = BTreeMap::new();
    for (i, clip) in corpus.iter().enumerate() {
        if clip.speakers.len() != 1 {
            return Err(ValidationError::new(
                "two-stage run",
                format!("corpus clip {i} has {} speakers; corpus must be singles", clip.speakers.len()),
            )
            .into());
        }
        if clip.frame_dims != FrameDims::new(CROP_H, CROP_W)? {
            return Err(ValidationError::new(
                "two-stage run",
                format!("corpus clip {i} is not at the {CROP_H}x{CROP_W} crop size"),
            )
            .into());
        }
        if let Some(prev) = seen.insert(clip.speakers[0].identity_id.clone(), i) {
            return Err(ValidationError::new(
                "two-stage run",
                format!(
                    "corpus clips {prev} and {i} share identity '{}'; pairing needs distinct identities",
                    clip.speakers[0].identity_id
                ),
            )
            .into());
        }
    }
    Ok(())
}

/// Continues an existing state to the end of its plan, starting at the step
/// the state has already completed.
///
/// Each step draws `batch_size` distinct corpus indices. Stage one hands
/// the draw to batch-mode selection (fair coin between singles and pairs);
/// stage two always pairs. Data and noise randomness are keyed per step
/// under `root_seed`, so a resumed run replays the same draws an unbroken
/// run would have made at those steps.
pub fn run_two_stage_from<T: Scalar>(
    state: &mut TrainState<T>,
    corpus: &[ClipSample<T>],
    encoder: &SyntheticEncoder,
    root_seed: u64,
) -> Result<TrainLog, CoreError> {
    let config = state.model.config.clone();
    if encoder.config != config {
        return Err(ValidationError::new(
            "two-stage run",
            "encoder config differs from model config",
        )
        .into());
    }
    validate_corpus(corpus, &config)?;
    let plan = two_stage_schedule(&config);
    let mut log = TrainLog::default();
    for global in state.step..plan.total_steps() {
        let stage = plan.stage_of(global);
        let lr = plan.lr_at(global);
        let step_key = format!("step-{global}");
        let mut rng_data = keyed_stream(root_seed, "toy-train-data", &step_key);
        let mut rng_noise = keyed_stream(root_seed, "toy-train-noise", &step_key);
        let draw = rand::seq::index::sample(&mut rng_data, corpus.len(), config.batch_size);
        let drawn: Vec<ClipSample<T>> = draw.iter().map(|i| corpus[i].clone()).collect();
        let (mode, samples) = match stage {
            Stage::Single => {
                let batch = select_batch_mode(drawn, &mut rng_data)?;
                (batch.mode, batch.samples)
            }
            Stage::Multi => (BatchMode::Paired, assemble_stage2_batch(&drawn)?),
        };
        state.stage = stage;
        let batch: Vec<ModelInputs<T>> =
            samples.iter().map(|s| encode_inputs(s, encoder)).collect::<Result<_, _>>()?;
        let loss = training_step(state, &batch, lr, &mut rng_noise)?;
        log.records.push(StepRecord { step: state.step, stage, mode, lr, loss });
    }
    Ok(log)
}

/// Runs both stages from scratch over a corpus of single-speaker clips.
pub fn run_two_stage<T: Scalar>(
    model: ToyModel<T>,
    corpus: &[ClipSample<T>],
    encoder: &SyntheticEncoder,
    root_seed: u64,
) -> Result<(TrainState<T>, TrainLog), CoreError> {
    let mut state = TrainState::new(model)?;
    let log = run_two_stage_from(&mut state, corpus, encoder, root_seed)?;
    Ok((state, log))
}
