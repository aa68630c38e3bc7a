//! Classifier-free guided sampling for the toy denoiser.
//!
//! Deterministic DDIM (no stochastic term): each step predicts the clean
//! latent from the guided noise estimate and re-noises it to the previous
//! timestep. The unconditional branch zeroes text and audio features while
//! keeping face tokens, reference features, and token masks.

use ndarray::Array2;

use crate::error::{CoreError, ValidationError};
use crate::grid::VideoTokenGrid;
use crate::rng::stream;
use crate::scalar::{lit, Scalar};

use super::{model_forward, randn_matrix, DiffusionSchedule, ModelInputs, ToyModel};

/// The unconditional twin of `inputs`: text features and every stream's
/// audio tokens zeroed, everything else retained.
pub fn unconditional_inputs<T: Scalar>(inputs: &ModelInputs<T>) -> ModelInputs<T> {
    let mut un = inputs.clone();
    un.f_text.fill(T::zero());
    for s in &mut un.streams {
        s.audio.tokens.fill(T::zero());
    }
    un
}

/// Classifier-free guidance combination: uncond + scale (cond - uncond).
/// Affine in the scale; scales 0 and 1 return the branch predictions as-is.
pub fn guided_prediction<T: Scalar>(
    uncond: &Array2<T>,
    cond: &Array2<T>,
    scale: f64,
) -> Array2<T> {
    if scale == 0.0 {
        return uncond.clone();
    }
    if scale == 1.0 {
        return cond.clone();
    }
    let s = lit::<T>(scale);
    uncond + &(cond - uncond).mapv(|v| v * s)
}

/// Runs the full reverse process from seeded Gaussian noise and returns the
/// final clean-latent estimate on the input grid. Deterministic in
/// (model, inputs, cfg_scale, seed).
pub fn cfg_sample<T: Scalar>(
    model: &ToyModel<T>,
    inputs: &ModelInputs<T>,
    cfg_scale: f64,
    seed: u64,
) -> Result<VideoTokenGrid<T>, CoreError> {
    if !(cfg_scale.is_finite() && cfg_scale >= 0.0) {
        return Err(ValidationError::new("sampling", "cfg_scale must be finite and >= 0").into());
    }
    let schedule = DiffusionSchedule::from_config(&model.config)?;
    let meta = inputs.meta();
    let mut rng = stream(seed, "cfg-sample-init");
    let mut x = randn_matrix::<T>(&mut rng, meta.n_tokens(), model.config.d_model);
    let uncond = unconditional_inputs(inputs);
    for t in (0..schedule.len()).rev() {
        let eps_hat = match cfg_scale {
            s if s == 0.0 => model_forward(model, &uncond, &x, t)?.0,
            s if s == 1.0 => model_forward(model, inputs, &x, t)?.0,
            _ => {
                let (e_cond, _) = model_forward(model, inputs, &x, t)?;
                let (e_uncond, _) = model_forward(model, &uncond, &x, t)?;
                guided_prediction(&e_uncond, &e_cond, cfg_scale)
            }
        };
        x = ddim_step(&schedule, &x, &eps_hat, t);
    }
    Ok(VideoTokenGrid::unflatten(x, meta)?)
}

/// One deterministic reverse step: recover x0 from the noise estimate, then
/// re-noise to timestep t-1 (or return x0 at the last step).
fn ddim_step<T: Scalar>(
    schedule: &DiffusionSchedule,
    x: &Array2<T>,
    eps_hat: &Array2<T>,
    t: usize,
) -> Array2<T> {
    let ab_t = schedule.alpha_bar(t);
    let noise_coef = lit::<T>((1.0 - ab_t).sqrt());
    let inv_signal = lit::<T>(1.0 / ab_t.sqrt());
    let x0_hat = (x - &eps_hat.mapv(|v| v * noise_coef)).mapv(|v| v * inv_signal);
    if t == 0 {
        return x0_hat;
    }
    let ab_prev = schedule.alpha_bar(t - 1);
    let signal = lit::<T>(ab_prev.sqrt());
    let noise = lit::<T>((1.0 - ab_prev).sqrt());
    x0_hat.mapv(|v| v * signal) + eps_hat.mapv(|v| v * noise)
}
