//! Two-stage training on a synthetic single-speaker corpus: stage one
//! mixes single and paired batches, stage two trains on pairs only at a
//! lower, warmed-up learning rate.

use std::fmt::Write as _;
use std::path::Path;

use afca_core::augment::BatchMode;
use afca_core::io::{load_checkpoint, save_checkpoint};
use afca_core::toy::{
    run_two_stage_from, synthetic_singles, Stage, SyntheticEncoder, ToyModel, TrainLog, TrainState,
};
use afca_core::CoreError;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{write_json, write_text};
use crate::{fail, EXIT_CONTRACT, EXIT_IO, EXIT_NUMERIC, EXIT_OK};

const CHECKPOINT_DIR: &str = "checkpoint";
const SUMMARY_WINDOW: usize = 10;

#[derive(Debug, Serialize)]
struct TrainSummary {
    seed: u64,
    resumed_from_step: Option<usize>,
    steps_run: usize,
    final_step: usize,
    final_stage: Stage,
    /// Mean loss over the first and last [`SUMMARY_WINDOW`] recorded steps;
    /// absent when the run had no steps left to take.
    head_mean_loss: Option<f64>,
    tail_mean_loss: Option<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Single => "single",
        Stage::Multi => "multi",
    }
}

fn mode_name(mode: BatchMode) -> &'static str {
    match mode {
        BatchMode::Single => "single",
        BatchMode::Paired => "paired",
    }
}

fn loss_curve_csv(log: &TrainLog) -> String {
    let mut csv = String::from("step,stage,mode,lr,loss\n");
    for r in &log.records {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.step,
            stage_name(r.stage),
            mode_name(r.mode),
            r.lr,
            r.loss
        )
        .expect("string write");
    }
    csv
}

fn code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Numeric(_) => EXIT_NUMERIC,
        CoreError::Io(_) => EXIT_IO,
        _ => EXIT_CONTRACT,
    }
}

pub fn run(cfg: &RunConfig, out: &Path, resume: bool) -> u8 {
    let checkpoint_dir = out.join(CHECKPOINT_DIR);
    let (mut state, resumed_from_step) = if resume {
        match load_checkpoint::<f32>(&checkpoint_dir, cfg.toy.clone()) {
            Ok(s) => {
                let at = s.step;
                (s, Some(at))
            }
            Err(e) => return fail(EXIT_IO, format!("cannot resume from {}: {e}", checkpoint_dir.display())),
        }
    } else {
        let model = match ToyModel::<f32>::init(cfg.toy.clone(), cfg.seed) {
            Ok(m) => m,
            Err(e) => return fail(EXIT_CONTRACT, format!("cannot initialize model: {e}")),
        };
        match TrainState::new(model) {
            Ok(s) => (s, None),
            Err(e) => return fail(EXIT_CONTRACT, format!("cannot initialize training: {e}")),
        }
    };

    let corpus = match synthetic_singles::<f32>(&cfg.toy, cfg.corpus_size, cfg.seed) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONTRACT, format!("cannot build corpus: {e}")),
    };
    let encoder = match SyntheticEncoder::new(cfg.seed, cfg.toy.clone()) {
        Ok(e) => e,
        Err(e) => return fail(EXIT_CONTRACT, format!("cannot build encoder: {e}")),
    };

    let log = match run_two_stage_from(&mut state, &corpus, &encoder, cfg.seed) {
        Ok(l) => l,
        Err(e) => return fail(code_for(&e), format!("training failed: {e}")),
    };

    if let Err(e) = save_checkpoint(&checkpoint_dir, &state) {
        return fail(EXIT_IO, format!("cannot save checkpoint: {e}"));
    }
    if let Err(m) = write_text(&out.join("loss_curve.csv"), &loss_curve_csv(&log)) {
        return fail(EXIT_IO, m);
    }
    if let Err(m) = write_json(&out.join("train_log.json"), &log) {
        return fail(EXIT_IO, m);
    }
    let summary = TrainSummary {
        seed: cfg.seed,
        resumed_from_step,
        steps_run: log.records.len(),
        final_step: state.step,
        final_stage: state.stage,
        head_mean_loss: finite(log.head_mean(SUMMARY_WINDOW)),
        tail_mean_loss: finite(log.tail_mean(SUMMARY_WINDOW)),
    };
    if let Err(m) = write_json(&out.join("summary.json"), &summary) {
        return fail(EXIT_IO, m);
    }
    match (summary.head_mean_loss, summary.tail_mean_loss) {
        (Some(head), Some(tail)) => {
            println!("train-toy: {} steps, loss {head:.6} -> {tail:.6}", summary.steps_run)
        }
        _ => println!("train-toy: nothing left to run at step {}", summary.final_step),
    }
    EXIT_OK
}
