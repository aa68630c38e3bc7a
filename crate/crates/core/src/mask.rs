//! Face-region masks: per-frame boxes, the video-global pixel box, and its
//! lowering onto the latent token grid.
//!
//! The pipeline is box-first: per-frame detections are unioned into one
//! global box, optionally dilated, and only then rasterized onto patches. A
//! token is active when ANY pixel of its patch lies inside the box, so the
//! mask never clips facial motion at patch boundaries.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, ShapeError, ValidationError};
use crate::grid::GridMeta;
use crate::scalar::{lit, Scalar};

// ---------------------------------------------------------------------------
// Pixel-space geometry
// ---------------------------------------------------------------------------

/// Half-open pixel rectangle: x spans `[x0, x1)`, y spans `[y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bbox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Bbox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self, ValidationError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(ValidationError::new(
                "bbox",
                format!("degenerate box ({x0},{y0},{x1},{y1}): need x0 < x1 and y0 < y1"),
            ));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Coordinate-wise union: min of mins, max of maxes.
    pub fn union(&self, other: &Bbox) -> Bbox {
        Bbox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// True when the half-open rectangles share at least one pixel.
    pub fn intersects(&self, other: &Bbox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    fn contains(&self, other: &Bbox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// Frame size in pixels, `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameDims {
    pub h_px: usize,
    pub w_px: usize,
}

impl FrameDims {
    pub fn new(h_px: usize, w_px: usize) -> Result<Self, ValidationError> {
        if h_px == 0 || w_px == 0 {
            return Err(ValidationError::new("frame dims", "zero-sized frame"));
        }
        Ok(Self { h_px, w_px })
    }

    fn contains(&self, bbox: &Bbox) -> bool {
        bbox.x1 <= self.w_px && bbox.y1 <= self.h_px
    }
}

/// A face box on a known canvas; the unit the token mask is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub bbox: Bbox,
    pub frame_dims: FrameDims,
}

impl PixelMask {
    pub fn new(bbox: Bbox, frame_dims: FrameDims) -> Result<Self, ValidationError> {
        if !frame_dims.contains(&bbox) {
            return Err(ValidationError::new(
                "pixel mask",
                format!(
                    "box ({},{},{},{}) exceeds frame {}x{}",
                    bbox.x0, bbox.y0, bbox.x1, bbox.y1, frame_dims.h_px, frame_dims.w_px
                ),
            ));
        }
        Ok(Self { bbox, frame_dims })
    }
}

/// Per-frame face detections for one identity across a clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceTrack {
    pub identity_id: String,
    pub frame_dims: FrameDims,
    pub boxes: Vec<Bbox>,
}

impl FaceTrack {
    pub fn new(
        identity_id: impl Into<String>,
        frame_dims: FrameDims,
        boxes: Vec<Bbox>,
    ) -> Result<Self, ValidationError> {
        if boxes.is_empty() {
            return Err(ValidationError::new("face track", "no boxes"));
        }
        for (i, b) in boxes.iter().enumerate() {
            // Re-run both constructor checks: serde paths hand us raw structs.
            Bbox::new(b.x0, b.y0, b.x1, b.y1)
                .map_err(|e| ValidationError::new("face track", format!("frame {i}: {e}")))?;
            if !frame_dims.contains(b) {
                return Err(ValidationError::new(
                    "face track",
                    format!(
                        "frame {i}: box ({},{},{},{}) exceeds frame {}x{}",
                        b.x0, b.y0, b.x1, b.y1, frame_dims.h_px, frame_dims.w_px
                    ),
                ));
            }
        }
        Ok(Self {
            identity_id: identity_id.into(),
            frame_dims,
            boxes,
        })
    }

    /// Parse a track from its JSON serialization.
    pub fn from_json(text: &str) -> Result<Self, ValidationError> {
        let raw: FaceTrack = serde_json::from_str(text)
            .map_err(|e| ValidationError::new("face track", e.to_string()))?;
        // Round-trip through the validating constructor.
        FaceTrack::new(raw.identity_id, raw.frame_dims, raw.boxes)
    }
}

// ---------------------------------------------------------------------------
// Token-space mask
// ---------------------------------------------------------------------------

/// Patch footprint in pixels, `(p_h, p_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub p_h: usize,
    pub p_w: usize,
}

impl PatchSpec {
    pub fn new(p_h: usize, p_w: usize) -> Result<Self, ValidationError> {
        if p_h == 0 || p_w == 0 {
            return Err(ValidationError::new("patch spec", "zero-sized patch"));
        }
        Ok(Self { p_h, p_w })
    }
}

/// What to do when frame dims are not multiples of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PadPolicy {
    /// Reject non-divisible frames.
    #[default]
    Strict,
    /// Extend the frame to the next patch multiple; padding counts as
    /// outside every box.
    ZeroPad,
}

/// Multiplicative gate over flat video tokens, in grid flatten order.
///
/// Values live in `[0, 1]`; the box pipeline only produces hard 0/1 but soft
/// gates are accepted. The per-frame slice is identical across latent frames
/// because the pixel box is video-global.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask<T: Scalar> {
    values: Array1<T>,
    meta: GridMeta,
}

impl<T: Scalar> TokenMask<T> {
    /// Replicate one latent frame's gate values across all `t_lat` frames.
    pub fn from_frame_values(frame_values: Array1<T>, t_lat: usize, rows: usize, cols: usize)
        -> Result<Self, CoreError>
    {
        let meta = GridMeta::new(t_lat, rows, cols)?;
        if frame_values.len() != meta.tokens_per_frame() {
            return Err(ShapeError::new(
                "token mask",
                format!(
                    "frame slice has {} values, grid frame holds {}",
                    frame_values.len(),
                    meta.tokens_per_frame()
                ),
            )
            .into());
        }
        check_gate_range(&frame_values)?;
        let mut values = Array1::zeros(meta.n_tokens());
        for t in 0..t_lat {
            let start = t * meta.tokens_per_frame();
            values
                .slice_mut(ndarray::s![start..start + meta.tokens_per_frame()])
                .assign(&frame_values);
        }
        Ok(Self { values, meta })
    }

    /// Wrap pre-flattened values, enforcing length, range, and per-frame
    /// replication.
    pub fn from_values(values: Array1<T>, meta: GridMeta) -> Result<Self, CoreError> {
        if values.len() != meta.n_tokens() {
            return Err(ShapeError::new(
                "token mask",
                format!("{} values for a {}-token grid", values.len(), meta.n_tokens()),
            )
            .into());
        }
        check_gate_range(&values)?;
        let per = meta.tokens_per_frame();
        let first = values.slice(ndarray::s![..per]);
        for t in 1..meta.t_lat {
            let slice = values.slice(ndarray::s![t * per..(t + 1) * per]);
            if slice != first {
                return Err(ValidationError::new(
                    "token mask",
                    format!("latent frame {t} differs from frame 0; the gate is video-global"),
                )
                .into());
            }
        }
        Ok(Self { values, meta })
    }

    pub fn values(&self) -> &Array1<T> {
        &self.values
    }

    pub fn meta(&self) -> GridMeta {
        self.meta
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when every gate value is exactly zero.
    pub fn is_null(&self) -> bool {
        self.values.iter().all(|v| *v == T::zero())
    }

    /// Element-wise domination: every gate here ≥ the other's.
    pub fn dominates(&self, other: &TokenMask<T>) -> bool {
        self.meta == other.meta
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| *a >= *b)
    }
}

fn check_gate_range<T: Scalar>(values: &Array1<T>) -> Result<(), ValidationError> {
    for (i, v) in values.iter().enumerate() {
        if !(*v >= T::zero() && *v <= T::one()) {
            return Err(ValidationError::new(
                "token mask",
                format!("gate {i} = {v} outside [0, 1]"),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Coordinate-wise union of every per-frame box in the track.
pub fn global_face_bbox(track: &FaceTrack) -> Result<PixelMask, ValidationError> {
    let mut boxes = track.boxes.iter();
    let first = *boxes
        .next()
        .ok_or_else(|| ValidationError::new("global face bbox", "empty track"))?;
    let union = boxes.fold(first, |acc, b| acc.union(b));
    debug_assert!(track.boxes.iter().all(|b| union.contains(b)));
    PixelMask::new(union, track.frame_dims)
}

/// Expand every side by `margin_px`, clamped to the frame.
pub fn dilate_bbox(mask: &PixelMask, margin_px: usize) -> PixelMask {
    let b = mask.bbox;
    let d = mask.frame_dims;
    PixelMask {
        bbox: Bbox {
            x0: b.x0.saturating_sub(margin_px),
            y0: b.y0.saturating_sub(margin_px),
            x1: (b.x1 + margin_px).min(d.w_px),
            y1: (b.y1 + margin_px).min(d.h_px),
        },
        frame_dims: d,
    }
}

/// Token grid shape implied by a frame and patch size under a pad policy.
pub fn token_grid_dims(
    frame_dims: FrameDims,
    patch: PatchSpec,
    pad: PadPolicy,
) -> Result<(usize, usize), ValidationError> {
    match pad {
        PadPolicy::Strict => {
            if frame_dims.h_px % patch.p_h != 0 || frame_dims.w_px % patch.p_w != 0 {
                return Err(ValidationError::new(
                    "token grid dims",
                    format!(
                        "frame {}x{} not divisible by patch {}x{}; enable zero padding",
                        frame_dims.h_px, frame_dims.w_px, patch.p_h, patch.p_w
                    ),
                ));
            }
            Ok((frame_dims.h_px / patch.p_h, frame_dims.w_px / patch.p_w))
        }
        PadPolicy::ZeroPad => Ok((
            frame_dims.h_px.div_ceil(patch.p_h),
            frame_dims.w_px.div_ceil(patch.p_w),
        )),
    }
}

/// Lower a pixel box onto the token grid: token `(t, r, c)` gates to 1 iff
/// its patch rectangle intersects the box, identically for every latent
/// frame `t`.
pub fn token_mask_from_bbox<T: Scalar>(
    mask: &PixelMask,
    t_lat: usize,
    patch: PatchSpec,
    pad: PadPolicy,
) -> Result<TokenMask<T>, CoreError> {
    let (rows, cols) = token_grid_dims(mask.frame_dims, patch, pad)?;
    let mut frame_values = Array1::zeros(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let patch_rect = Bbox {
                x0: c * patch.p_w,
                y0: r * patch.p_h,
                x1: (c + 1) * patch.p_w,
                y1: (r + 1) * patch.p_h,
            };
            if patch_rect.intersects(&mask.bbox) {
                frame_values[r * cols + c] = lit::<T>(1.0);
            }
        }
    }
    TokenMask::from_frame_values(frame_values, t_lat, rows, cols)
}
