//! Two-person clip admission: the metadata-level filter cascade and the
//! chunking plan for admitted clips.
//!
//! Filters consume detector outputs (sync score matrices, diarization,
//! face tracks, flow magnitudes) that arrive as metadata; no model inference
//! happens here. Every filter is pure, all filters run on every clip, and
//! the audit record names each rule that rejected, so filter order never
//! matters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ValidationError;
use crate::mask::FaceTrack;

/// Chunk targets are drawn from Normal(4.0, 0.5) seconds, truncated to
/// [2.5, 5.5].
pub const CHUNK_MEAN_S: f64 = 4.0;
pub const CHUNK_STD_S: f64 = 0.5;
pub const CHUNK_MIN_S: f64 = 2.5;
pub const CHUNK_MAX_S: f64 = 5.5;

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// SyncNet-style confidence matrix: rows are audio tracks, columns faces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncMatrix {
    pub scores: [[f64; 2]; 2],
}

impl SyncMatrix {
    pub fn new(scores: [[f64; 2]; 2]) -> Result<Self, ValidationError> {
        if scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(ValidationError::new("sync matrix", "non-finite score"));
        }
        Ok(Self { scores })
    }
}

/// One diarization span with the speakers active in it. Speaker ids are
/// raw detector output; validity of the id set is a filter concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiarizationSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub speakers: Vec<u8>,
}

impl DiarizationSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Diarization output for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiarizationSegments {
    pub segments: Vec<DiarizationSegment>,
}

impl DiarizationSegments {
    pub fn new(segments: Vec<DiarizationSegment>) -> Result<Self, ValidationError> {
        for (i, seg) in segments.iter().enumerate() {
            if !(seg.start_s.is_finite() && seg.end_s.is_finite()) {
                return Err(ValidationError::new(
                    "diarization",
                    format!("segment {i}: non-finite bounds"),
                ));
            }
            if seg.start_s < 0.0 || seg.end_s <= seg.start_s {
                return Err(ValidationError::new(
                    "diarization",
                    format!(
                        "segment {i}: bad bounds [{}, {})",
                        seg.start_s, seg.end_s
                    ),
                ));
            }
        }
        Ok(Self { segments })
    }

    /// Sorted by start with no overlap (touching endpoints are fine).
    fn check_layout(&self) -> Result<(), ValidationError> {
        for (i, pair) in self.segments.windows(2).enumerate() {
            if pair[1].start_s < pair[0].end_s {
                return Err(ValidationError::new(
                    "diarization",
                    format!(
                        "segments {i} and {} overlap: [{}, {}) then [{}, {})",
                        i + 1,
                        pair[0].start_s,
                        pair[0].end_s,
                        pair[1].start_s,
                        pair[1].end_s
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Everything the filter cascade needs to judge one candidate clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMetadata {
    pub clip_id: String,
    pub duration_s: f64,
    /// Detected face count per frame, as count -> number of frames.
    pub face_count_histogram: BTreeMap<usize, usize>,
    /// Left and right face tracks, in claimed reading order.
    pub tracks: [FaceTrack; 2],
    pub mean_flow: f64,
    pub sync: SyncMatrix,
    pub diarization: DiarizationSegments,
    /// Per-clip override of the configured sync threshold.
    #[serde(default)]
    pub sync_min_score: Option<f64>,
}

impl ClipMetadata {
    fn validate(&self) -> Result<(), ValidationError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(ValidationError::new(
                "clip metadata",
                format!("duration {} must be positive", self.duration_s),
            ));
        }
        if !self.mean_flow.is_finite() {
            return Err(ValidationError::new("clip metadata", "non-finite mean flow"));
        }
        SyncMatrix::new(self.sync.scores)?;
        DiarizationSegments::new(self.diarization.segments.clone())?;
        if let Some(last) = self.diarization.segments.last() {
            if last.end_s > self.duration_s + 1e-9 {
                return Err(ValidationError::new(
                    "clip metadata",
                    format!(
                        "diarization reaches {}s but clip lasts {}s",
                        last.end_s, self.duration_s
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Filter thresholds. The sync threshold has no published value; the
/// default here is a working setting, not a fidelity claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub sync_min_score: f64,
    /// Fraction of frames that must contain exactly two faces.
    pub face_quorum: f64,
    /// Mean optical-flow ceiling; absent means the motion filter is off.
    pub max_mean_flow: Option<f64>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            sync_min_score: 5.0,
            face_quorum: 0.95,
            max_mean_flow: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Verdicts
// ---------------------------------------------------------------------------

/// Outcome of one filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject { rule: &'static str, reason: String },
}

impl Verdict {
    fn reject(rule: &'static str, reason: impl Into<String>) -> Self {
        Verdict::Reject {
            rule,
            reason: reason.into(),
        }
    }

    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

pub const RULE_SYNC_DOMINANCE: &str = "sync-diagonal-dominance";
pub const RULE_SYNC_THRESHOLD: &str = "sync-threshold";
pub const RULE_SPEAKER_STATES: &str = "speaker-states";
pub const RULE_SPATIAL_ORDER: &str = "spatial-ordering";
pub const RULE_FACE_QUORUM: &str = "face-count-quorum";
pub const RULE_EXCESSIVE_MOTION: &str = "excessive-motion";

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

/// Accept iff the two largest entries are exactly the diagonal (ties with
/// an off-diagonal entry reject) and both diagonal entries clear
/// `min_score`.
pub fn check_sync_matrix(m: &SyncMatrix, min_score: f64) -> Verdict {
    let diag_min = m.scores[0][0].min(m.scores[1][1]);
    let off_max = m.scores[0][1].max(m.scores[1][0]);
    if diag_min <= off_max {
        return Verdict::reject(
            RULE_SYNC_DOMINANCE,
            format!("off-diagonal score {off_max} reaches diagonal minimum {diag_min}"),
        );
    }
    if diag_min < min_score {
        return Verdict::reject(
            RULE_SYNC_THRESHOLD,
            format!("diagonal score {diag_min} below threshold {min_score}"),
        );
    }
    Verdict::Accept
}

/// Accept iff every segment's active set is {0}, {1}, or {0, 1}.
/// Overlapping or unsorted segments are malformed input, not a rejection.
pub fn check_speaker_states(segs: &DiarizationSegments) -> Result<Verdict, ValidationError> {
    segs.check_layout()?;
    for (i, seg) in segs.segments.iter().enumerate() {
        let mut ids: Vec<u8> = seg.speakers.clone();
        ids.sort_unstable();
        ids.dedup();
        let valid = matches!(ids.as_slice(), [0] | [1] | [0, 1]);
        if !valid {
            return Ok(Verdict::reject(
                RULE_SPEAKER_STATES,
                format!("segment {i}: active set {ids:?} is not {{0}}, {{1}}, or {{0,1}}"),
            ));
        }
    }
    Ok(Verdict::Accept)
}

fn center_x(b: &crate::mask::Bbox) -> f64 {
    (b.x0 + b.x1) as f64 / 2.0
}

/// Accept iff the left track's face center stays strictly left of the
/// right track's in every frame.
pub fn check_spatial_consistency(
    track_l: &FaceTrack,
    track_r: &FaceTrack,
) -> Result<Verdict, ValidationError> {
    if track_l.boxes.len() != track_r.boxes.len() {
        return Err(ValidationError::new(
            "spatial consistency",
            format!(
                "track lengths differ: {} vs {} frames",
                track_l.boxes.len(),
                track_r.boxes.len()
            ),
        ));
    }
    for (frame, (l, r)) in track_l.boxes.iter().zip(&track_r.boxes).enumerate() {
        if center_x(l) >= center_x(r) {
            return Ok(Verdict::reject(
                RULE_SPATIAL_ORDER,
                format!("identity swap at frame {frame}"),
            ));
        }
    }
    Ok(Verdict::Accept)
}

/// Accept iff at least `quorum` of frames contain exactly two faces.
pub fn check_face_quorum(histogram: &BTreeMap<usize, usize>, quorum: f64) -> Verdict {
    let total: usize = histogram.values().sum();
    if total == 0 {
        return Verdict::reject(RULE_FACE_QUORUM, "no frames counted");
    }
    let two = *histogram.get(&2).unwrap_or(&0);
    let fraction = two as f64 / total as f64;
    if fraction < quorum {
        return Verdict::reject(
            RULE_FACE_QUORUM,
            format!("{fraction:.3} of frames show two faces; quorum {quorum}"),
        );
    }
    Verdict::Accept
}

/// Accept iff mean optical flow stays at or below the ceiling (when set).
pub fn check_motion(mean_flow: f64, max_mean_flow: Option<f64>) -> Verdict {
    match max_mean_flow {
        Some(ceiling) if mean_flow > ceiling => Verdict::reject(
            RULE_EXCESSIVE_MOTION,
            format!("mean flow {mean_flow} exceeds {ceiling}"),
        ),
        _ => Verdict::Accept,
    }
}

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

/// One planned chunk: which consecutive segments it concatenates, the
/// target that drove it, and its realized length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub segment_indices: Vec<usize>,
    pub target_s: f64,
    pub duration_s: f64,
}

/// Draw one chunk-length target from the truncated normal.
pub fn sample_chunk_target(rng: &mut impl Rng) -> f64 {
    let normal = Normal::new(CHUNK_MEAN_S, CHUNK_STD_S).expect("valid normal");
    loop {
        let draw = normal.sample(rng);
        if (CHUNK_MIN_S..=CHUNK_MAX_S).contains(&draw) {
            return draw;
        }
    }
}

/// Greedy concatenation of consecutive segments toward sampled targets:
/// a chunk keeps absorbing the next segment while doing so moves its total
/// closer to the target, and every chunk takes at least one segment.
pub fn sample_clip_lengths(
    durations: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<ChunkPlan>, ValidationError> {
    plan_chunks(durations, || sample_chunk_target(rng))
}

pub(crate) fn plan_chunks(
    durations: &[f64],
    mut next_target: impl FnMut() -> f64,
) -> Result<Vec<ChunkPlan>, ValidationError> {
    for (i, d) in durations.iter().enumerate() {
        if !(d.is_finite() && *d > 0.0) {
            return Err(ValidationError::new(
                "chunk planning",
                format!("segment {i} duration {d} must be positive"),
            ));
        }
    }
    let mut plans = Vec::new();
    let mut i = 0;
    while i < durations.len() {
        let target = next_target();
        let mut indices = vec![i];
        let mut total = durations[i];
        i += 1;
        while i < durations.len() {
            let with_next = total + durations[i];
            if (with_next - target).abs() <= (total - target).abs() {
                indices.push(i);
                total = with_next;
                i += 1;
            } else {
                break;
            }
        }
        plans.push(ChunkPlan {
            segment_indices: indices,
            target_s: target,
            duration_s: total,
        });
    }
    Ok(plans)
}

// ---------------------------------------------------------------------------
// Per-clip audit and corpus run
// ---------------------------------------------------------------------------

/// Audit record for one clip: overall verdict, every rule that rejected,
/// and the chunk plan when admitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAudit {
    pub clip_id: String,
    pub verdict: String,
    pub failed_rules: Vec<String>,
    pub reasons: Vec<String>,
    pub chunk_plan: Vec<ChunkPlan>,
}

/// Run every filter on one clip. The chunk plan is computed only for
/// accepted clips, from the diarization segment durations, using the
/// provided rng.
pub fn curate_clip(
    meta: &ClipMetadata,
    config: &CurationConfig,
    rng: &mut impl Rng,
) -> Result<ClipAudit, ValidationError> {
    meta.validate()?;
    let min_score = meta.sync_min_score.unwrap_or(config.sync_min_score);
    let verdicts = [
        check_sync_matrix(&meta.sync, min_score),
        check_speaker_states(&meta.diarization)?,
        check_spatial_consistency(&meta.tracks[0], &meta.tracks[1])?,
        check_face_quorum(&meta.face_count_histogram, config.face_quorum),
        check_motion(meta.mean_flow, config.max_mean_flow),
    ];
    let mut failed_rules = Vec::new();
    let mut reasons = Vec::new();
    for verdict in verdicts {
        if let Verdict::Reject { rule, reason } = verdict {
            failed_rules.push(rule.to_string());
            reasons.push(reason);
        }
    }
    let accepted = failed_rules.is_empty();
    let chunk_plan = if accepted {
        let durations: Vec<f64> = meta
            .diarization
            .segments
            .iter()
            .map(DiarizationSegment::duration_s)
            .collect();
        if durations.is_empty() {
            Vec::new()
        } else {
            sample_clip_lengths(&durations, rng)?
        }
    } else {
        Vec::new()
    };
    Ok(ClipAudit {
        clip_id: meta.clip_id.clone(),
        verdict: if accepted { "accept" } else { "reject" }.to_string(),
        failed_rules,
        reasons,
        chunk_plan,
    })
}

/// Corpus-level outcome counts; per-rule counts use sorted keys so the
/// serialized summary is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldStats {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub malformed: usize,
    pub rejections_by_rule: BTreeMap<String, usize>,
}

/// One undecodable or invalid input line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedClip {
    pub line: usize,
    pub error: String,
}

/// Full curation run over a newline-delimited JSON corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRun {
    pub audits: Vec<ClipAudit>,
    pub malformed: Vec<MalformedClip>,
    pub stats: YieldStats,
}

/// Filter every clip in an NDJSON corpus. Chunking randomness is keyed by
/// clip id under the root seed, so results are independent of line order.
pub fn curate_corpus(ndjson: &str, config: &CurationConfig, root_seed: u64) -> CurationRun {
    let mut audits = Vec::new();
    let mut malformed = Vec::new();
    for (idx, line) in ndjson.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<ClipMetadata, _> = serde_json::from_str(line);
        let outcome = match parsed {
            Ok(meta) => {
                let mut rng = crate::rng::keyed_stream(root_seed, "curation-chunking", &meta.clip_id);
                curate_clip(&meta, config, &mut rng).map_err(|e| e.to_string())
            }
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(audit) => audits.push(audit),
            Err(error) => malformed.push(MalformedClip {
                line: idx + 1,
                error,
            }),
        }
    }

    let mut rejections_by_rule: BTreeMap<String, usize> = BTreeMap::new();
    let mut accepted = 0;
    for audit in &audits {
        if audit.verdict == "accept" {
            accepted += 1;
        }
        for rule in &audit.failed_rules {
            *rejections_by_rule.entry(rule.clone()).or_insert(0) += 1;
        }
    }
    let stats = YieldStats {
        total: audits.len() + malformed.len(),
        accepted,
        rejected: audits.len() - accepted,
        malformed: malformed.len(),
        rejections_by_rule,
    };
    CurationRun {
        audits,
        malformed,
        stats,
    }
}
