//! Latent video token grids and their fixed flatten order.
//!
//! A [`VideoTokenGrid`] is the latent block the denoiser operates on:
//! `(latent frames, token rows, token cols, channels)`. The flatten contract
//! is latent frame outermost, then row, then column; every consumer of a flat
//! `(N, d_model)` matrix relies on that order to map token index to latent
//! frame.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::ShapeError;
use crate::scalar::Scalar;

/// Shape of a token grid without its data: enough to map flat token indices
/// back to latent frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridMeta {
    /// Latent frame count.
    pub t_lat: usize,
    /// Token rows per latent frame.
    pub rows: usize,
    /// Token cols per latent frame.
    pub cols: usize,
}

impl GridMeta {
    pub fn new(t_lat: usize, rows: usize, cols: usize) -> Result<Self, ShapeError> {
        if t_lat == 0 || rows == 0 || cols == 0 {
            return Err(ShapeError::new(
                "grid meta",
                "all of t_lat, rows, cols must be >= 1",
            ));
        }
        Ok(Self { t_lat, rows, cols })
    }

    /// Total token count `N = t_lat * rows * cols`.
    pub fn n_tokens(&self) -> usize {
        self.t_lat * self.rows * self.cols
    }

    /// Tokens per latent frame.
    pub fn tokens_per_frame(&self) -> usize {
        self.rows * self.cols
    }

    /// Latent frame owning flat token index `n`.
    pub fn frame_of(&self, n: usize) -> usize {
        debug_assert!(n < self.n_tokens());
        n / self.tokens_per_frame()
    }
}

/// Latent video tokens of shape `(t_lat, rows, cols, d_model)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTokenGrid<T: Scalar> {
    data: Array4<T>,
}

impl<T: Scalar> VideoTokenGrid<T> {
    /// Wrap a `(t_lat, rows, cols, d_model)` array. Every axis must be nonempty.
    pub fn new(data: Array4<T>) -> Result<Self, ShapeError> {
        let (t, r, c, d) = data.dim();
        if t == 0 || r == 0 || c == 0 || d == 0 {
            return Err(ShapeError::new(
                "video token grid",
                "all four axes must be >= 1",
            ));
        }
        Ok(Self { data })
    }

    pub fn meta(&self) -> GridMeta {
        let (t, r, c, _) = self.data.dim();
        GridMeta {
            t_lat: t,
            rows: r,
            cols: c,
        }
    }

    pub fn d_model(&self) -> usize {
        self.data.dim().3
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    /// Flatten to `(N, d_model)` with latent frame outermost, then row, then
    /// column.
    pub fn flatten(&self) -> Array2<T> {
        let (t, r, c, d) = self.data.dim();
        let flat = self
            .data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t * r * c, d))
            .expect("standard-layout grid reshapes to (N, d)");
        flat
    }

    /// Inverse of [`flatten`](Self::flatten) for a matrix of matching size.
    pub fn unflatten(flat: Array2<T>, meta: GridMeta) -> Result<Self, ShapeError> {
        let (n, d) = flat.dim();
        if n != meta.n_tokens() {
            return Err(ShapeError::new(
                "unflatten",
                format!("expected {} token rows, got {}", meta.n_tokens(), n),
            ));
        }
        let data = flat
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((meta.t_lat, meta.rows, meta.cols, d))
            .expect("row-major matrix reshapes to grid");
        Self::new(data)
    }
}
