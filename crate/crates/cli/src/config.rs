//! Run configuration: one JSON document covering every subcommand.

use std::path::Path;

use afca_core::curation::CurationConfig;
use afca_core::metrics::DEFAULT_JUMP_PX;
use afca_core::toy::ToyDiTConfig;
use serde::{Deserialize, Serialize};

/// Metric evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSettings {
    /// Per-frame landmark jump ceiling in canvas pixels.
    pub jump_px: f64,
    /// Keypoint rows to keep for motion scoring; absent keeps all.
    pub eye_indices: Option<Vec<usize>>,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            jump_px: DEFAULT_JUMP_PX,
            eye_indices: None,
        }
    }
}

/// Everything a run can be told. Unknown keys are rejected so a typo in a
/// config file fails loudly instead of silently using a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stream of randomness is keyed under it.
    pub seed: u64,
    pub toy: ToyDiTConfig,
    pub curation: CurationConfig,
    pub metrics: MetricsSettings,
    /// Synthetic training corpus size for `train-toy`.
    pub corpus_size: usize,
    /// Stream count for `demo-forward`.
    pub demo_identities: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            toy: ToyDiTConfig::default(),
            curation: CurationConfig::default(),
            metrics: MetricsSettings::default(),
            corpus_size: 8,
            demo_identities: 2,
        }
    }
}

impl RunConfig {
    /// Contract checks beyond what deserialization can express.
    pub fn validate(&self) -> Result<(), String> {
        self.toy.validate().map_err(|e| e.to_string())?;
        if !(self.metrics.jump_px.is_finite() && self.metrics.jump_px > 0.0) {
            return Err(format!("metrics.jump_px must be finite and positive, got {}", self.metrics.jump_px));
        }
        if !self.curation.sync_min_score.is_finite() {
            return Err("curation.sync_min_score must be finite".into());
        }
        if !(self.curation.face_quorum.is_finite()
            && (0.0..=1.0).contains(&self.curation.face_quorum))
        {
            return Err(format!(
                "curation.face_quorum must lie in [0, 1], got {}",
                self.curation.face_quorum
            ));
        }
        if let Some(flow) = self.curation.max_mean_flow {
            if !(flow.is_finite() && flow >= 0.0) {
                return Err(format!("curation.max_mean_flow must be finite and >= 0, got {flow}"));
            }
        }
        if !(1..=8).contains(&self.demo_identities) {
            return Err(format!(
                "demo_identities is {}; the demo supports 1 through 8 streams",
                self.demo_identities
            ));
        }
        Ok(())
    }
}

/// Read and parse a config file. IO and format problems come back as the
/// error string; contract problems are left to [`RunConfig::validate`].
pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse config {}: {e}", path.display()))
}
