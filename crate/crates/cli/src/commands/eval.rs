//! Metric evaluation: interactivity and sync scores for every clip in a
//! landmark corpus directory, with optional per-clip motion tables.

use std::fmt::Write as _;
use std::path::Path;

use afca_core::metrics::{anomaly_clamp, corpus_report, group_means, LandmarkSequence};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{write_json, write_text};
use crate::{fail, EXIT_IO, EXIT_OK, EXIT_PARTIAL};

#[derive(Debug, Serialize)]
struct GroupRow {
    group: String,
    mean_interactivity: f64,
    mean_sync_c_star: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    seed: u64,
    jump_px: f64,
    report: &'a afca_core::metrics::CorpusReport,
    groups: Vec<GroupRow>,
}

/// Mean keypoint displacement between consecutive frames, one row per step.
fn motion_over_time(seq: &LandmarkSequence<f64>) -> Vec<f64> {
    let p = seq.points();
    let (frames, k, _) = p.dim();
    let mut rows = Vec::with_capacity(frames.saturating_sub(1));
    for j in 0..frames.saturating_sub(1) {
        let mut acc = 0.0;
        for i in 0..k {
            let dx = p[[j + 1, i, 0]] - p[[j, i, 0]];
            let dy = p[[j + 1, i, 1]] - p[[j, i, 1]];
            acc += (dx * dx + dy * dy).sqrt();
        }
        rows.push(acc / k as f64);
    }
    rows
}

fn write_motion_plots(cfg: &RunConfig, out: &Path, corpus: &Path, clip_ids: &[String]) -> Result<(), (u8, String)> {
    let plots = out.join("plots");
    std::fs::create_dir_all(&plots)
        .map_err(|e| (EXIT_IO, format!("cannot create {}: {e}", plots.display())))?;
    for id in clip_ids {
        let mut csv = String::from("frame,spk0_px,spk1_px\n");
        let mut series = Vec::new();
        for spk in 0..2 {
            let path = corpus.join(format!("{id}.spk{spk}.landmarks.json"));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
            let seq = LandmarkSequence::<f64>::from_json(&text)
                .map_err(|e| (EXIT_IO, format!("{}: {e}", path.display())))?;
            series.push(motion_over_time(&anomaly_clamp(&seq, cfg.metrics.jump_px)));
        }
        let steps = series[0].len().min(series[1].len());
        for j in 0..steps {
            writeln!(csv, "{j},{},{}", series[0][j], series[1][j]).expect("string write");
        }
        write_text(&plots.join(format!("{id}.motion.csv")), &csv).map_err(|m| (EXIT_IO, m))?;
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, out: &Path, corpus: &Path, plot: bool) -> u8 {
    let report = match corpus_report(corpus, cfg.metrics.jump_px, cfg.metrics.eye_indices.as_deref()) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_IO, format!("cannot evaluate corpus: {e}")),
    };

    let groups: Vec<GroupRow> = group_means(&report.clips)
        .into_iter()
        .map(|(group, (mi, ms))| GroupRow {
            group,
            mean_interactivity: mi,
            mean_sync_c_star: ms,
        })
        .collect();
    let wrapped = EvalReport {
        seed: cfg.seed,
        jump_px: cfg.metrics.jump_px,
        report: &report,
        groups,
    };
    if let Err(m) = write_json(&out.join("report.json"), &wrapped) {
        return fail(EXIT_IO, m);
    }
    if let Err(m) = write_text(&out.join("report.csv"), &report.to_csv()) {
        return fail(EXIT_IO, m);
    }

    if plot {
        let ids: Vec<String> = report.clips.iter().map(|c| c.clip_id.clone()).collect();
        if let Err((code, m)) = write_motion_plots(cfg, out, corpus, &ids) {
            return fail(code, m);
        }
    }

    println!(
        "eval: {} clips scored, {} skipped",
        report.clips.len(),
        report.skipped.len()
    );
    if report.skipped.is_empty() {
        EXIT_OK
    } else {
        let reasons: Vec<String> = report
            .skipped
            .iter()
            .map(|s| format!("{}: {}", s.clip_id, s.reason))
            .collect();
        fail(EXIT_PARTIAL, format!("skipped clips: {}", reasons.join("; ")))
    }
}
