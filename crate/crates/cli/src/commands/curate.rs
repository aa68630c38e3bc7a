//! Corpus curation: run every admission filter over an NDJSON clip
//! listing and write one audit verdict per clip.

use std::path::Path;

use afca_core::curation::curate_corpus;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::output::{write_json, write_text};
use crate::{fail, EXIT_IO, EXIT_OK, EXIT_PARTIAL};

#[derive(Debug, Serialize)]
struct CurateSummary<'a> {
    seed: u64,
    stats: &'a afca_core::curation::YieldStats,
    malformed: &'a [afca_core::curation::MalformedClip],
}

pub fn run(cfg: &RunConfig, out: &Path, input: &Path) -> u8 {
    let ndjson = match std::fs::read_to_string(input) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_IO, format!("cannot read {}: {e}", input.display())),
    };
    let result = curate_corpus(&ndjson, &cfg.curation, cfg.seed);

    // One JSON object per line: clip audits in input order, then the
    // undecodable lines as validation-error verdicts.
    let mut audit_lines = String::new();
    for audit in &result.audits {
        match serde_json::to_string(audit) {
            Ok(line) => {
                audit_lines.push_str(&line);
                audit_lines.push('\n');
            }
            Err(e) => return fail(EXIT_IO, format!("cannot serialize audit: {e}")),
        }
    }
    for bad in &result.malformed {
        let line = json!({
            "line": bad.line,
            "verdict": "validation-error",
            "error": bad.error,
        });
        audit_lines.push_str(&line.to_string());
        audit_lines.push('\n');
    }
    if let Err(m) = write_text(&out.join("audit.ndjson"), &audit_lines) {
        return fail(EXIT_IO, m);
    }

    let summary = CurateSummary {
        seed: cfg.seed,
        stats: &result.stats,
        malformed: &result.malformed,
    };
    if let Err(m) = write_json(&out.join("summary.json"), &summary) {
        return fail(EXIT_IO, m);
    }

    let s = &result.stats;
    println!(
        "curate: {} clips, {} accepted, {} rejected, {} malformed",
        s.total, s.accepted, s.rejected, s.malformed
    );
    if s.rejected > 0 || s.malformed > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    }
}
