//! Conversational metrics over face-aligned eye landmarks: motion, the
//! listening-phase interactivity score, the speaking-phase lip-sync
//! aggregate, and the anomaly clamp that precedes them.
//!
//! Landmarks live on a 256x256 face-aligned canvas. Interval weights are
//! frame counts; because both metrics are ratios, the time unit cancels.
//! Displacements use the Euclidean norm per 2-D keypoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::scalar::{lit, Scalar};

/// Canvas side length the thresholds are calibrated to.
pub const CANVAS_PX: usize = 256;

/// Freeze threshold: mean per-keypoint displacement above this is anomalous.
pub const DEFAULT_JUMP_PX: f64 = 10.0;

// ---------------------------------------------------------------------------
// Landmark sequences
// ---------------------------------------------------------------------------

/// Eye keypoints per frame: `(|S| frames, |E| points, 2 coords)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence<T: Scalar> {
    points: Array3<T>,
    fps: f64,
}

impl<T: Scalar> LandmarkSequence<T> {
    pub fn new(points: Array3<T>, fps: f64) -> Result<Self, ValidationError> {
        let (frames, keypoints, coords) = points.dim();
        if frames == 0 || keypoints == 0 {
            return Err(ValidationError::new(
                "landmark sequence",
                "need at least one frame and one keypoint",
            ));
        }
        if coords != 2 {
            return Err(ValidationError::new(
                "landmark sequence",
                format!("{coords} coordinates per point, expected 2"),
            ));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(ValidationError::new("landmark sequence", "non-finite coordinate"));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(ValidationError::new(
                "landmark sequence",
                format!("fps {fps} must be positive"),
            ));
        }
        Ok(Self { points, fps })
    }

    pub fn points(&self) -> &Array3<T> {
        &self.points
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Frame count `|S|`.
    pub fn len(&self) -> usize {
        self.points.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keypoint_count(&self) -> usize {
        self.points.dim().1
    }

    /// Sub-sequence over the half-open frame interval.
    pub fn restrict(&self, interval: Interval) -> Result<Self, ValidationError> {
        if interval.end > self.len() {
            return Err(ValidationError::new(
                "landmark sequence",
                format!(
                    "interval [{}, {}) exceeds {} frames",
                    interval.start,
                    interval.end,
                    self.len()
                ),
            ));
        }
        Ok(Self {
            points: self.points.slice(s![interval.start..interval.end, .., ..]).to_owned(),
            fps: self.fps,
        })
    }

    /// Keep only the given keypoint indices (an eye-region subset of a
    /// denser layout). Order is preserved as given.
    pub fn select_points(&self, indices: &[usize]) -> Result<Self, ValidationError> {
        if indices.is_empty() {
            return Err(ValidationError::new("landmark sequence", "empty keypoint subset"));
        }
        for &i in indices {
            if i >= self.keypoint_count() {
                return Err(ValidationError::new(
                    "landmark sequence",
                    format!("keypoint index {i} out of {}", self.keypoint_count()),
                ));
            }
        }
        Ok(Self {
            points: self.points.select(ndarray::Axis(1), indices),
            fps: self.fps,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ValidationError> {
        let file: LandmarkFile =
            serde_json::from_str(text).map_err(|e| ValidationError::new("landmark file", e.to_string()))?;
        file.into_sequence()
    }

    pub fn to_json(&self) -> String {
        let frames: Vec<Vec<(f64, f64)>> = (0..self.len())
            .map(|j| {
                (0..self.keypoint_count())
                    .map(|i| {
                        (
                            self.points[(j, i, 0)].to_f64().unwrap(),
                            self.points[(j, i, 1)].to_f64().unwrap(),
                        )
                    })
                    .collect()
            })
            .collect();
        let file = LandmarkFile {
            fps: self.fps,
            canvas: (CANVAS_PX, CANVAS_PX),
            frames,
        };
        serde_json::to_string_pretty(&file).expect("landmark file serializes")
    }
}

/// On-disk landmark format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkFile {
    fps: f64,
    canvas: (usize, usize),
    frames: Vec<Vec<(f64, f64)>>,
}

impl LandmarkFile {
    fn into_sequence<T: Scalar>(self) -> Result<LandmarkSequence<T>, ValidationError> {
        if self.canvas != (CANVAS_PX, CANVAS_PX) {
            return Err(ValidationError::new(
                "landmark file",
                format!(
                    "canvas {:?} unsupported; scores are calibrated to ({CANVAS_PX}, {CANVAS_PX})",
                    self.canvas
                ),
            ));
        }
        let frames = self.frames.len();
        let keypoints = self.frames.first().map_or(0, Vec::len);
        if frames == 0 || keypoints == 0 {
            return Err(ValidationError::new("landmark file", "no frames or keypoints"));
        }
        if self.frames.iter().any(|f| f.len() != keypoints) {
            return Err(ValidationError::new("landmark file", "ragged keypoint rows"));
        }
        let mut points = Array3::zeros((frames, keypoints, 2));
        for (j, frame) in self.frames.iter().enumerate() {
            for (i, (x, y)) in frame.iter().enumerate() {
                points[(j, i, 0)] = lit::<T>(*x);
                points[(j, i, 1)] = lit::<T>(*y);
            }
        }
        LandmarkSequence::new(points, self.fps)
    }
}

// ---------------------------------------------------------------------------
// Speaking / listening segmentation
// ---------------------------------------------------------------------------

/// Half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Self, ValidationError> {
        if start >= end {
            return Err(ValidationError::new(
                "interval",
                format!("degenerate interval [{start}, {end})"),
            ));
        }
        Ok(Self { start, end })
    }

    pub fn frames(&self) -> usize {
        self.end - self.start
    }

    fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Speaking and listening intervals of one speaker, in frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerSegments {
    pub id: usize,
    pub speaking: Vec<Interval>,
    pub listening: Vec<Interval>,
}

/// Two-speaker segmentation. By convention speaker 0 speaks during the L1
/// total and listens during L3; speaker 1 listens during L2 and speaks
/// during L4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentAnnotation {
    speakers: [SpeakerSegments; 2],
}

impl SegmentAnnotation {
    pub fn new(speakers: [SpeakerSegments; 2]) -> Result<Self, ValidationError> {
        if speakers[0].id != 0 || speakers[1].id != 1 {
            return Err(ValidationError::new(
                "segment annotation",
                format!(
                    "speaker ids ({}, {}) must be (0, 1)",
                    speakers[0].id, speakers[1].id
                ),
            ));
        }
        for spk in &speakers {
            for a in &spk.speaking {
                for b in &spk.listening {
                    if a.overlaps(b) {
                        return Err(ValidationError::new(
                            "segment annotation",
                            format!(
                                "speaker {}: speaking [{}, {}) overlaps listening [{}, {})",
                                spk.id, a.start, a.end, b.start, b.end
                            ),
                        ));
                    }
                }
            }
        }
        Ok(Self { speakers })
    }

    pub fn speaker(&self, id: usize) -> &SpeakerSegments {
        &self.speakers[id]
    }

    /// Total speaking frames of speaker 0.
    pub fn l1(&self) -> usize {
        total_frames(&self.speakers[0].speaking)
    }

    /// Total listening frames of speaker 1.
    pub fn l2(&self) -> usize {
        total_frames(&self.speakers[1].listening)
    }

    /// Total listening frames of speaker 0.
    pub fn l3(&self) -> usize {
        total_frames(&self.speakers[0].listening)
    }

    /// Total speaking frames of speaker 1.
    pub fn l4(&self) -> usize {
        total_frames(&self.speakers[1].speaking)
    }

    /// Largest frame index any interval touches.
    pub fn max_frame(&self) -> usize {
        self.speakers
            .iter()
            .flat_map(|s| s.speaking.iter().chain(&s.listening))
            .map(|i| i.end)
            .max()
            .unwrap_or(0)
    }

    pub fn from_json(text: &str) -> Result<Self, ValidationError> {
        let file: AnnotationFile =
            serde_json::from_str(text).map_err(|e| ValidationError::new("annotation file", e.to_string()))?;
        file.into_annotation()
    }

    pub fn to_json(&self) -> String {
        let file = AnnotationFile {
            speakers: self
                .speakers
                .iter()
                .map(|s| SpeakerFile {
                    id: s.id,
                    speaking: s.speaking.iter().map(|i| (i.start, i.end)).collect(),
                    listening: s.listening.iter().map(|i| (i.start, i.end)).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("annotation file serializes")
    }
}

fn total_frames(intervals: &[Interval]) -> usize {
    intervals.iter().map(Interval::frames).sum()
}

/// On-disk annotation format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    speakers: Vec<SpeakerFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeakerFile {
    id: usize,
    speaking: Vec<(usize, usize)>,
    listening: Vec<(usize, usize)>,
}

impl AnnotationFile {
    fn into_annotation(self) -> Result<SegmentAnnotation, ValidationError> {
        let count = self.speakers.len();
        let [a, b]: [SpeakerFile; 2] = self.speakers.try_into().map_err(|_| {
            ValidationError::new("annotation file", format!("{count} speakers, expected 2"))
        })?;
        let parse = |spk: SpeakerFile| -> Result<SpeakerSegments, ValidationError> {
            let parse_all = |raw: Vec<(usize, usize)>| {
                raw.into_iter()
                    .map(|(s, e)| Interval::new(s, e))
                    .collect::<Result<Vec<_>, _>>()
            };
            Ok(SpeakerSegments {
                id: spk.id,
                speaking: parse_all(spk.speaking)?,
                listening: parse_all(spk.listening)?,
            })
        };
        SegmentAnnotation::new([parse(a)?, parse(b)?])
    }
}

/// Externally computed lip-sync confidences for each speaking phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSyncScores {
    pub sync_l1: f64,
    pub sync_l4: f64,
}

impl SegmentSyncScores {
    pub fn new(sync_l1: f64, sync_l4: f64) -> Result<Self, ValidationError> {
        if !(sync_l1.is_finite() && sync_l4.is_finite()) {
            return Err(ValidationError::new("sync scores", "non-finite score"));
        }
        Ok(Self { sync_l1, sync_l4 })
    }

    pub fn from_json(text: &str) -> Result<Self, ValidationError> {
        let raw: SegmentSyncScores =
            serde_json::from_str(text).map_err(|e| ValidationError::new("sync score file", e.to_string()))?;
        Self::new(raw.sync_l1, raw.sync_l4)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean per-keypoint Euclidean displacement between two frames.
fn mean_displacement<T: Scalar>(points: &Array3<T>, from: usize, to: usize) -> T {
    let keypoints = points.dim().1;
    let mut total = T::zero();
    for i in 0..keypoints {
        let dx = points[(to, i, 0)] - points[(from, i, 0)];
        let dy = points[(to, i, 1)] - points[(from, i, 1)];
        total = total + (dx * dx + dy * dy).sqrt();
    }
    total / lit::<T>(keypoints as f64)
}

/// Freeze anomalous frames: scanning forward, a frame whose mean keypoint
/// displacement from the last accepted frame exceeds `jump_px` is replaced
/// by that accepted frame, and frames stay frozen until a raw frame lands
/// within `jump_px` of the frozen value again.
pub fn anomaly_clamp<T: Scalar>(seq: &LandmarkSequence<T>, jump_px: f64) -> LandmarkSequence<T> {
    let raw = seq.points();
    let mut out = raw.clone();
    let threshold = lit::<T>(jump_px);
    let mut accepted = 0usize;
    for j in 1..seq.len() {
        // Compare the raw frame against the last ACCEPTED frame, not the
        // raw predecessor: that is what lets a returning trajectory unfreeze.
        let disp = {
            let keypoints = raw.dim().1;
            let mut total = T::zero();
            for i in 0..keypoints {
                let dx = raw[(j, i, 0)] - raw[(accepted, i, 0)];
                let dy = raw[(j, i, 1)] - raw[(accepted, i, 1)];
                total = total + (dx * dx + dy * dy).sqrt();
            }
            total / lit::<T>(keypoints as f64)
        };
        if disp > threshold {
            let frozen = raw.slice(s![accepted, .., ..]).to_owned();
            out.slice_mut(s![j, .., ..]).assign(&frozen);
        } else {
            out.slice_mut(s![j, .., ..]).assign(&raw.slice(s![j, .., ..]));
            accepted = j;
        }
    }
    LandmarkSequence::new(out, seq.fps()).expect("clamped sequence stays valid")
}

/// Average per-frame keypoint motion in pixels:
/// `(1/(|S|-1)) Σ_j (1/|E|) Σ_i ||E_{i,j+1} - E_{i,j}||`.
pub fn motion_score<T: Scalar>(seq: &LandmarkSequence<T>) -> Result<T, ValidationError> {
    if seq.len() < 2 {
        return Err(ValidationError::new(
            "motion score",
            format!("{} frames; need at least 2", seq.len()),
        ));
    }
    let mut total = T::zero();
    for j in 0..seq.len() - 1 {
        total = total + mean_displacement(seq.points(), j, j + 1);
    }
    Ok(total / lit::<T>((seq.len() - 1) as f64))
}

/// Frame-weighted motion over a set of intervals: `Σ len_k · motion_k` and
/// `Σ len_k`. An interval too short to contain a transition contributes
/// zero motion at its full weight.
fn weighted_motion<T: Scalar>(
    seq: &LandmarkSequence<T>,
    intervals: &[Interval],
) -> Result<(T, usize), ValidationError> {
    let mut weighted = T::zero();
    let mut frames = 0usize;
    for interval in intervals {
        let sub = seq.restrict(*interval)?;
        frames += interval.frames();
        if sub.len() >= 2 {
            weighted = weighted + motion_score(&sub)? * lit::<T>(interval.frames() as f64);
        }
    }
    Ok((weighted, frames))
}

/// Listening-phase responsiveness:
/// `(L2 · Motion_L2 + L3 · Motion_L3) / (L2 + L3)`, where `Motion_L2` is the
/// motion of speaker 1's landmarks over its listening intervals and
/// `Motion_L3` that of speaker 0 over its own. Sequences are expected to be
/// anomaly-clamped already.
pub fn interactivity<T: Scalar>(
    seq_a: &LandmarkSequence<T>,
    seq_b: &LandmarkSequence<T>,
    ann: &SegmentAnnotation,
) -> Result<T, ValidationError> {
    if seq_a.len() != seq_b.len() {
        return Err(ValidationError::new(
            "interactivity",
            format!("speaker sequences differ: {} vs {} frames", seq_a.len(), seq_b.len()),
        ));
    }
    if ann.max_frame() > seq_a.len() {
        return Err(ValidationError::new(
            "interactivity",
            format!(
                "annotation reaches frame {} but clip has {}",
                ann.max_frame(),
                seq_a.len()
            ),
        ));
    }
    let (l2_weighted, l2) = weighted_motion(seq_b, &ann.speaker(1).listening)?;
    let (l3_weighted, l3) = weighted_motion(seq_a, &ann.speaker(0).listening)?;
    if l2 + l3 == 0 {
        return Err(ValidationError::new(
            "interactivity",
            "no listening frames; metric undefined",
        ));
    }
    Ok((l2_weighted + l3_weighted) / lit::<T>((l2 + l3) as f64))
}

/// Speaking-phase lip-sync aggregate:
/// `(L1 · sync_L1 + L4 · sync_L4) / (L1 + L4)`.
pub fn sync_c_star(scores: &SegmentSyncScores, ann: &SegmentAnnotation) -> Result<f64, ValidationError> {
    let l1 = ann.l1() as f64;
    let l4 = ann.l4() as f64;
    if l1 + l4 == 0.0 {
        return Err(ValidationError::new(
            "sync aggregate",
            "no speaking frames; metric undefined",
        ));
    }
    Ok((l1 * scores.sync_l1 + l4 * scores.sync_l4) / (l1 + l4))
}

// ---------------------------------------------------------------------------
// Corpus evaluation
// ---------------------------------------------------------------------------

/// Per-clip metric results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub interactivity: f64,
    pub sync_c_star: f64,
}

/// A clip the report could not evaluate, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedClip {
    pub clip_id: String,
    pub reason: String,
}

/// Corpus-level metric report: per-clip rows sorted by clip id, their means,
/// and everything that had to be skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub clips: Vec<ClipReport>,
    pub mean_interactivity: Option<f64>,
    pub mean_sync_c_star: Option<f64>,
    pub skipped: Vec<SkippedClip>,
}

impl CorpusReport {
    pub fn to_csv(&self) -> String {
        let mut csv = String::from("clip_id,interactivity,sync_c_star\n");
        for clip in &self.clips {
            writeln!(
                csv,
                "{},{},{}",
                clip.clip_id, clip.interactivity, clip.sync_c_star
            )
            .expect("string write");
        }
        csv
    }
}

/// Corpus layout: each clip contributes `<id>.ann.json`,
/// `<id>.spk0.landmarks.json`, `<id>.spk1.landmarks.json`, `<id>.sync.json`.
/// Clips are discovered by their annotation file.
pub fn corpus_report(
    dir: &Path,
    jump_px: f64,
    eye_indices: Option<&[usize]>,
) -> Result<CorpusReport, ValidationError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| ValidationError::new("corpus report", format!("{}: {e}", dir.display())))?;
    let mut clip_ids: Vec<String> = Vec::new();
    for entry in entries {
        let entry =
            entry.map_err(|e| ValidationError::new("corpus report", e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".ann.json") {
            clip_ids.push(id.to_string());
        }
    }
    clip_ids.sort();

    let mut clips = Vec::new();
    let mut skipped = Vec::new();
    for clip_id in clip_ids {
        match evaluate_clip(dir, &clip_id, jump_px, eye_indices) {
            Ok(report) => clips.push(report),
            Err(e) => skipped.push(SkippedClip {
                clip_id,
                reason: e.to_string(),
            }),
        }
    }

    let mean = |pick: fn(&ClipReport) -> f64| -> Option<f64> {
        if clips.is_empty() {
            None
        } else {
            Some(clips.iter().map(pick).sum::<f64>() / clips.len() as f64)
        }
    };
    Ok(CorpusReport {
        mean_interactivity: mean(|c| c.interactivity),
        mean_sync_c_star: mean(|c| c.sync_c_star),
        clips,
        skipped,
    })
}

fn evaluate_clip(
    dir: &Path,
    clip_id: &str,
    jump_px: f64,
    eye_indices: Option<&[usize]>,
) -> Result<ClipReport, ValidationError> {
    let read = |suffix: &str| -> Result<String, ValidationError> {
        let path = dir.join(format!("{clip_id}{suffix}"));
        fs::read_to_string(&path)
            .map_err(|e| ValidationError::new("corpus report", format!("{}: {e}", path.display())))
    };
    let ann = SegmentAnnotation::from_json(&read(".ann.json")?)?;
    let scores = SegmentSyncScores::from_json(&read(".sync.json")?)?;
    let mut seq_a = LandmarkSequence::<f64>::from_json(&read(".spk0.landmarks.json")?)?;
    let mut seq_b = LandmarkSequence::<f64>::from_json(&read(".spk1.landmarks.json")?)?;
    if let Some(indices) = eye_indices {
        seq_a = seq_a.select_points(indices)?;
        seq_b = seq_b.select_points(indices)?;
    }
    let seq_a = anomaly_clamp(&seq_a, jump_px);
    let seq_b = anomaly_clamp(&seq_b, jump_px);
    Ok(ClipReport {
        clip_id: clip_id.to_string(),
        interactivity: interactivity(&seq_a, &seq_b, &ann)?,
        sync_c_star: sync_c_star(&scores, &ann)?,
    })
}

/// Group per-clip rows by an id prefix up to the first '_', for summary
/// tables; deterministic ordering via the sorted map.
pub fn group_means(clips: &[ClipReport]) -> BTreeMap<String, (f64, f64)> {
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for clip in clips {
        let key = clip.clip_id.split('_').next().unwrap_or("").to_string();
        let entry = sums.entry(key).or_insert((0.0, 0.0, 0));
        entry.0 += clip.interactivity;
        entry.1 += clip.sync_c_star;
        entry.2 += 1;
    }
    sums.into_iter()
        .map(|(k, (i, s, n))| (k, (i / n as f64, s / n as f64)))
        .collect()
}
