//! Deterministic artifact writing. Every primary output is byte-identical
//! across reruns with the same seed; anything time-dependent goes into the
//! `run_meta.json` sidecar and nowhere else.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Pretty JSON with a trailing newline, the layout every artifact uses.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| format!("cannot serialize {}: {e}", path.display()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub subcommand: String,
    pub started_unix_s: u64,
    /// Parallelism cap from `AFCA_LAB_THREADS`; absent means unlimited.
    pub threads_cap: Option<usize>,
}

/// The one artifact reruns may differ in: it carries the wall-clock start
/// and the environment-provided thread cap.
pub fn write_run_meta(dir: &Path, subcommand: &str, threads_cap: Option<usize>) -> Result<(), String> {
    let started_unix_s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &dir.join("run_meta.json"),
        &RunMeta {
            subcommand: subcommand.to_string(),
            started_unix_s,
            threads_cap,
        },
    )
}
