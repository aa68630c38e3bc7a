//! Single-to-multi-person training augmentation: face-centered crops,
//! aspect-preserving random enlargement, and horizontal pairing of two
//! single-speaker clips into one two-speaker sample.
//!
//! Geometry only: samples carry face tracks and audio embeddings, never
//! decoded pixels, so the whole pipeline runs at metadata cost.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, ValidationError};
use crate::mask::{Bbox, FaceTrack, FrameDims};
use crate::scalar::Scalar;

/// Canonical single-speaker crop size in pixels.
pub const CROP_H: usize = 480;
pub const CROP_W: usize = 416;
/// Width of a horizontally paired two-speaker frame.
pub const PAIR_W: usize = 832;
/// Pixel frames per latent frame.
pub const TEMPORAL_STRIDE: usize = 4;
pub const DEFAULT_FPS: u32 = 24;

/// Latent frames covering `pixel_frames` at the fixed temporal stride.
pub fn latent_frame_count(pixel_frames: usize) -> usize {
    (pixel_frames.max(1) - 1) / TEMPORAL_STRIDE + 1
}

const DUAL_PROMPTS_RAW: &str = include_str!("../resources/dual_prompts.txt");

/// The generic two-speaker captions substituted when clips are paired.
pub fn dual_prompts() -> Vec<&'static str> {
    DUAL_PROMPTS_RAW
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One speaker's data inside a sample: identity, audio embeddings
/// (rows are audio tokens), and the face track in sample coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSpeaker<T: Scalar> {
    pub identity_id: String,
    pub audio: Array2<T>,
    pub face_track: FaceTrack,
}

/// A training unit: one speaker when raw, two after pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample<T: Scalar> {
    pub frame_dims: FrameDims,
    pub frame_count: usize,
    pub fps: u32,
    pub text: String,
    pub speakers: Vec<ClipSpeaker<T>>,
}

impl<T: Scalar> ClipSample<T> {
    pub fn new(
        frame_dims: FrameDims,
        frame_count: usize,
        fps: u32,
        text: impl Into<String>,
        speakers: Vec<ClipSpeaker<T>>,
    ) -> Result<Self, ValidationError> {
        if frame_count == 0 {
            return Err(ValidationError::new("clip sample", "zero frames"));
        }
        if fps == 0 {
            return Err(ValidationError::new("clip sample", "zero fps"));
        }
        if speakers.is_empty() || speakers.len() > 2 {
            return Err(ValidationError::new(
                "clip sample",
                format!("{} speakers; expected 1 or 2", speakers.len()),
            ));
        }
        let min_audio = crate::afca::AUDIO_TOKENS_PER_FRAME * (latent_frame_count(frame_count) - 1);
        let d_af = speakers[0].audio.ncols();
        let audio_rows = speakers[0].audio.nrows();
        for sp in &speakers {
            if sp.face_track.boxes.len() != frame_count {
                return Err(ValidationError::new(
                    "clip sample",
                    format!(
                        "speaker '{}': {} face boxes for {} frames",
                        sp.identity_id,
                        sp.face_track.boxes.len(),
                        frame_count
                    ),
                ));
            }
            if sp.face_track.frame_dims != frame_dims {
                return Err(ValidationError::new(
                    "clip sample",
                    format!("speaker '{}': track dims differ from sample dims", sp.identity_id),
                ));
            }
            if sp.audio.ncols() != d_af || sp.audio.nrows() != audio_rows {
                return Err(ValidationError::new(
                    "clip sample",
                    format!("speaker '{}': audio shape differs across speakers", sp.identity_id),
                ));
            }
            if sp.audio.nrows() < min_audio {
                return Err(ValidationError::new(
                    "clip sample",
                    format!(
                        "speaker '{}': {} audio rows cover fewer than {} windows for {} frames",
                        sp.identity_id,
                        sp.audio.nrows(),
                        min_audio,
                        frame_count
                    ),
                ));
            }
        }
        Ok(Self {
            frame_dims,
            frame_count,
            fps,
            text: text.into(),
            speakers,
        })
    }
}

// ---------------------------------------------------------------------------
// Crop windows
// ---------------------------------------------------------------------------

/// An axis-aligned pixel window with the canonical 480:416 aspect,
/// half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Cross-multiplied aspect check; the tolerance is one pixel on the
/// larger axis.
fn aspect_ok(h: usize, w: usize) -> bool {
    (h * CROP_W).abs_diff(w * CROP_H) <= CROP_H
}

impl CropWindow {
    pub fn new(
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        frame: FrameDims,
    ) -> Result<Self, ValidationError> {
        if x1 <= x0 || y1 <= y0 {
            return Err(ValidationError::new("crop window", "empty window"));
        }
        if x1 > frame.w_px || y1 > frame.h_px {
            return Err(ValidationError::new(
                "crop window",
                format!(
                    "window [{x0},{x1})x[{y0},{y1}) leaves the {}x{} frame",
                    frame.h_px, frame.w_px
                ),
            ));
        }
        if !aspect_ok(y1 - y0, x1 - x0) {
            return Err(ValidationError::new(
                "crop window",
                format!("{}x{} is not {CROP_H}:{CROP_W} within a pixel", y1 - y0, x1 - x0),
            ));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, other: &CropWindow) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// The minimal 480x416 window centered on a face, translated (never
/// shrunk) to stay inside the frame.
pub fn face_centered_min_crop(
    frame: FrameDims,
    face_center: (usize, usize),
) -> Result<CropWindow, ValidationError> {
    let (cx, cy) = face_center;
    if frame.h_px < CROP_H || frame.w_px < CROP_W {
        return Err(ValidationError::new(
            "min crop",
            format!(
                "frame {}x{} is smaller than the {CROP_H}x{CROP_W} crop",
                frame.h_px, frame.w_px
            ),
        ));
    }
    if cx >= frame.w_px || cy >= frame.h_px {
        return Err(ValidationError::new(
            "min crop",
            format!("face center ({cx}, {cy}) lies outside the frame"),
        ));
    }
    let x0 = cx
        .saturating_sub(CROP_W / 2)
        .min(frame.w_px - CROP_W);
    let y0 = cy
        .saturating_sub(CROP_H / 2)
        .min(frame.h_px - CROP_H);
    CropWindow::new(x0, y0, x0 + CROP_W, y0 + CROP_H, frame)
}

/// Grow a window by a uniform factor in [1, max feasible], keeping its
/// aspect, containing the input, and staying inside the frame.
pub fn random_enlarge(
    window: CropWindow,
    frame: FrameDims,
    rng: &mut impl Rng,
) -> Result<CropWindow, ValidationError> {
    let h = window.height();
    let w = window.width();
    let max_scale = (frame.h_px as f64 / h as f64).min(frame.w_px as f64 / w as f64);
    if max_scale <= 1.0 {
        return Ok(window);
    }
    let scale = rng.gen_range(1.0..=max_scale);
    let new_h = ((h as f64 * scale).round() as usize).clamp(h, frame.h_px);
    let new_w = ((w as f64 * scale).round() as usize).clamp(w, frame.w_px);

    let place = |c0: usize, c1: usize, new_len: usize, limit: usize| -> usize {
        let center = (c0 + c1) as f64 / 2.0;
        let raw = (center - new_len as f64 / 2.0).round() as i64;
        // Containment of [c0, c1) and the frame bound are both feasible
        // because new_len >= c1 - c0 and new_len <= limit.
        let lo = c1.saturating_sub(new_len) as i64;
        let hi = c0.min(limit - new_len) as i64;
        raw.clamp(lo, hi.max(lo)) as usize
    };
    let x0 = place(window.x0, window.x1, new_w, frame.w_px);
    let y0 = place(window.y0, window.y1, new_h, frame.h_px);
    CropWindow::new(x0, y0, x0 + new_w, y0 + new_h, frame)
}

/// Apply a window to a sample: coordinates transform into the canonical
/// 480x416 crop space (translate, then scale when the window was
/// enlarged). Boxes are clamped to the crop; a face wholly outside its
/// own crop window is an error.
pub fn crop_sample<T: Scalar>(
    sample: &ClipSample<T>,
    window: CropWindow,
) -> Result<ClipSample<T>, CoreError> {
    if window.x1 > sample.frame_dims.w_px || window.y1 > sample.frame_dims.h_px {
        return Err(ValidationError::new("crop", "window leaves the sample frame").into());
    }
    let target = FrameDims::new(CROP_H, CROP_W)?;
    let sx = CROP_W as f64 / window.width() as f64;
    let sy = CROP_H as f64 / window.height() as f64;
    let map_x = |x: usize| -> usize {
        let v = (x as f64 - window.x0 as f64) * sx;
        v.round().clamp(0.0, CROP_W as f64) as usize
    };
    let map_y = |y: usize| -> usize {
        let v = (y as f64 - window.y0 as f64) * sy;
        v.round().clamp(0.0, CROP_H as f64) as usize
    };
    let mut speakers = Vec::with_capacity(sample.speakers.len());
    for sp in &sample.speakers {
        let mut boxes = Vec::with_capacity(sp.face_track.boxes.len());
        for (frame, b) in sp.face_track.boxes.iter().enumerate() {
            let (x0, x1) = (map_x(b.x0), map_x(b.x1));
            let (y0, y1) = (map_y(b.y0), map_y(b.y1));
            if x1 <= x0 || y1 <= y0 {
                return Err(ValidationError::new(
                    "crop",
                    format!(
                        "speaker '{}': face at frame {frame} falls outside the crop window",
                        sp.identity_id
                    ),
                )
                .into());
            }
            boxes.push(Bbox::new(x0, y0, x1, y1)?);
        }
        speakers.push(ClipSpeaker {
            identity_id: sp.identity_id.clone(),
            audio: sp.audio.clone(),
            face_track: FaceTrack::new(sp.identity_id.clone(), target, boxes)?,
        });
    }
    Ok(ClipSample::new(
        target,
        sample.frame_count,
        sample.fps,
        sample.text.clone(),
        speakers,
    )?)
}

// ---------------------------------------------------------------------------
// Pairing
// ---------------------------------------------------------------------------

/// Uniform draw from the dual-speaker prompt list, keyed by the pair's
/// identity ids so pairing stays deterministic.
pub fn dual_prompt_for(identity_a: &str, identity_b: &str) -> &'static str {
    let prompts = dual_prompts();
    let mut hasher = Sha256::new();
    hasher.update(b"dual-prompt\0");
    hasher.update(identity_a.as_bytes());
    hasher.update([0u8]);
    hasher.update(identity_b.as_bytes());
    let digest = hasher.finalize();
    let idx = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) as usize;
    prompts[idx % prompts.len()]
}

fn trimmed_track(
    track: &FaceTrack,
    frames: usize,
    dims: FrameDims,
    x_offset: usize,
) -> Result<FaceTrack, ValidationError> {
    let boxes: Vec<Bbox> = track.boxes[..frames]
        .iter()
        .map(|b| Bbox::new(b.x0 + x_offset, b.y0, b.x1 + x_offset, b.y1))
        .collect::<Result<_, _>>()?;
    FaceTrack::new(track.identity_id.clone(), dims, boxes)
}

/// Concatenate two cropped single-speaker clips side by side: `a` on the
/// left, `b` on the right with its face coordinates shifted by the crop
/// width. Both clips trim to the shorter frame and audio lengths; the
/// caption becomes a dual-speaker prompt.
pub fn hconcat_pair<T: Scalar>(
    a: &ClipSample<T>,
    b: &ClipSample<T>,
) -> Result<ClipSample<T>, CoreError> {
    for (name, s) in [("left", a), ("right", b)] {
        if s.speakers.len() != 1 {
            return Err(ValidationError::new(
                "pairing",
                format!("{name} clip has {} speakers; pairing needs singles", s.speakers.len()),
            )
            .into());
        }
        if s.frame_dims.h_px != CROP_H || s.frame_dims.w_px != CROP_W {
            return Err(ValidationError::new(
                "pairing",
                format!(
                    "{name} clip is {}x{}; crop to {CROP_H}x{CROP_W} first",
                    s.frame_dims.h_px, s.frame_dims.w_px
                ),
            )
            .into());
        }
    }
    if a.fps != b.fps {
        return Err(ValidationError::new(
            "pairing",
            format!("fps mismatch: {} vs {}", a.fps, b.fps),
        )
        .into());
    }
    let (sa, sb) = (&a.speakers[0], &b.speakers[0]);
    if sa.identity_id == sb.identity_id {
        return Err(ValidationError::new(
            "pairing",
            format!("both clips carry identity '{}'", sa.identity_id),
        )
        .into());
    }
    if sa.audio.ncols() != sb.audio.ncols() {
        return Err(ValidationError::new(
            "pairing",
            format!(
                "audio channel mismatch: {} vs {}",
                sa.audio.ncols(),
                sb.audio.ncols()
            ),
        )
        .into());
    }
    let frames = a.frame_count.min(b.frame_count);
    let audio_rows = sa.audio.nrows().min(sb.audio.nrows());
    let dims = FrameDims::new(CROP_H, PAIR_W)?;
    let trim_audio = |audio: &Array2<T>| audio.slice(s![..audio_rows, ..]).to_owned();
    let speakers = vec![
        ClipSpeaker {
            identity_id: sa.identity_id.clone(),
            audio: trim_audio(&sa.audio),
            face_track: trimmed_track(&sa.face_track, frames, dims, 0)?,
        },
        ClipSpeaker {
            identity_id: sb.identity_id.clone(),
            audio: trim_audio(&sb.audio),
            face_track: trimmed_track(&sb.face_track, frames, dims, CROP_W)?,
        },
    ];
    Ok(ClipSample::new(
        dims,
        frames,
        a.fps,
        dual_prompt_for(&sa.identity_id, &sb.identity_id),
        speakers,
    )?)
}

// ---------------------------------------------------------------------------
// Batch mode
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Single,
    Paired,
}

/// A batch after mode selection, with counts at both granularities:
/// `pre_pair_count` is the incoming sample count, `sample_count` what the
/// batch holds now.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch<T: Scalar> {
    pub mode: BatchMode,
    pub samples: Vec<ClipSample<T>>,
    pub pre_pair_count: usize,
}

impl<T: Scalar> AugmentedBatch<T> {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

/// Flip one fair coin for the whole batch: pass it through unchanged, or
/// pair (0,1), (2,3), ... into two-speaker samples. Only the mode draw
/// consumes randomness; pairing itself is deterministic in batch order.
pub fn select_batch_mode<T: Scalar>(
    batch: Vec<ClipSample<T>>,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch<T>, CoreError> {
    let pre_pair_count = batch.len();
    let paired_mode = rng.gen_bool(0.5);
    if !paired_mode {
        return Ok(AugmentedBatch {
            mode: BatchMode::Single,
            samples: batch,
            pre_pair_count,
        });
    }
    if batch.len() % 2 != 0 {
        log::warn!(
            "pair mode on odd batch of {}: dropping the last sample",
            batch.len()
        );
    }
    let mut samples = Vec::with_capacity(batch.len() / 2);
    for pair in batch.chunks_exact(2) {
        samples.push(hconcat_pair(&pair[0], &pair[1])?);
    }
    Ok(AugmentedBatch {
        mode: BatchMode::Paired,
        samples,
        pre_pair_count,
    })
}
