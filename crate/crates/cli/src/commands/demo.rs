//! Seeded forward trace: per-block audio-face contribution norms for each
//! identity, plus the invariance checks that guard the aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use afca_core::afca::{aggregate_gated, AudioTokenStream, FaceTokens, IdentityStream};
use afca_core::augment::{CROP_H, CROP_W};
use afca_core::grid::VideoTokenGrid;
use afca_core::io::load_checkpoint;
use afca_core::mask::{token_mask_from_bbox, Bbox, FrameDims, PadPolicy, PixelMask, TokenMask};
use afca_core::rng::{keyed_stream, stream};
use afca_core::toy::{hidden_states, ModelInputs, SyntheticEncoder, ToyModel};
use afca_core::CoreError;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::write_json;
use crate::{fail, EXIT_CONTRACT, EXIT_INVARIANCE, EXIT_IO, EXIT_OK};

/// Tolerance for the reassociation drift a permuted summation may show.
const PERMUTATION_TOL: f64 = 1e-6;

#[derive(Debug, Serialize)]
struct CheckResult {
    name: String,
    max_abs_diff: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct BlockTrace {
    block: usize,
    /// Frobenius norm of each identity's aggregation contribution.
    contribution_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
struct DemoTrace {
    seed: u64,
    weights: String,
    identities: Vec<String>,
    frame: [usize; 2],
    grid: [usize; 3],
    timestep: usize,
    blocks: Vec<BlockTrace>,
    checks: Vec<CheckResult>,
}

fn randn2(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Identity streams side by side, one horizontal crop band each.
fn demo_inputs(cfg: &RunConfig) -> Result<ModelInputs<f64>, CoreError> {
    let toy = &cfg.toy;
    let n = cfg.demo_identities;
    let dims = FrameDims::new(CROP_H, CROP_W * n)?;
    let t_lat = toy.t_lat();
    let patch = toy.patch()?;
    let enc = SyntheticEncoder::new(cfg.seed, toy.clone())?;

    let mut streams = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("demo{i}");
        let mut rng = keyed_stream(cfg.seed, "demo-speaker", &id);
        let dx: usize = rng.gen_range(0..=16);
        let dy: usize = rng.gen_range(0..=16);
        let x0 = CROP_W * i;
        let bbox = Bbox::new(x0 + 120 + dx, 132 + dy, x0 + 280 + dx, 332 + dy)?;
        let pixel_mask = PixelMask::new(bbox, dims)?;
        masks.push(token_mask_from_bbox::<f64>(&pixel_mask, t_lat, patch, PadPolicy::Strict)?);
        let audio = AudioTokenStream::new(randn2(&mut rng, 4 * t_lat, toy.d_af), id.clone())?;
        let face = FaceTokens::new(enc.encode_face::<f64>(&id), id.clone())?;
        streams.push(IdentityStream::new(audio, face, pixel_mask)?);
    }

    let meta = masks[0].meta();
    let mut latent_rng = stream(cfg.seed, "demo-latent");
    let latent = VideoTokenGrid::new(Array4::from_shape_fn(
        (meta.t_lat, meta.rows, meta.cols, toy.d_model),
        |_| latent_rng.sample(StandardNormal),
    ))?;
    let ids: Vec<&str> = streams.iter().map(|s| s.identity_id.as_str()).collect();
    let f_text = enc.encode_text::<f64>("demo forward trace");
    let f_ref = enc.encode_reference::<f64>(&ids);
    ModelInputs::new(latent, f_text, f_ref, streams, masks, toy.l_text)
}

/// Checkpoints store training weights in `f32`; the trace runs in `f64`,
/// which every `f32` embeds into exactly.
fn widened_model(dir: &Path, cfg: &RunConfig) -> Result<ToyModel<f64>, CoreError> {
    let narrow = load_checkpoint::<f32>(dir, cfg.toy.clone())?;
    let mut model = ToyModel::<f64>::zeros(cfg.toy.clone())?;
    let src = narrow.model.weights.tensors();
    let mut dst = model.weights.tensors_mut();
    for ((_, s), (_, d)) in src.iter().zip(dst.iter_mut()) {
        let sv = s.as_dyn();
        let mut dv = d.as_dyn_mut();
        for (a, b) in sv.iter().zip(dv.iter_mut()) {
            *b = f64::from(*a);
        }
    }
    drop(dst);
    Ok(model)
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn run(cfg: &RunConfig, out: &Path, weights: Option<&Path>) -> u8 {
    let (model, weights_desc) = match weights {
        Some(dir) => match widened_model(dir, cfg) {
            Ok(m) => (m, format!("checkpoint:{}", dir.display())),
            Err(e) => return fail(EXIT_IO, format!("cannot load weights: {e}")),
        },
        None => match ToyModel::<f64>::init(cfg.toy.clone(), cfg.seed) {
            Ok(m) => (m, "seeded".to_string()),
            Err(e) => return fail(EXIT_CONTRACT, format!("cannot initialize model: {e}")),
        },
    };
    let inputs = match demo_inputs(cfg) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_CONTRACT, format!("cannot build demo inputs: {e}")),
    };
    let meta = inputs.meta();
    let x = inputs.latent.flatten();
    let timestep = cfg.toy.diffusion_steps / 2;

    let states = match hidden_states(&model, &inputs, &x, timestep) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONTRACT, format!("forward trace failed: {e}")),
    };

    let pairs = inputs.stream_pairs();
    let mut blocks = Vec::with_capacity(cfg.toy.depth);
    for (b, bw) in model.weights.blocks.iter().enumerate() {
        let h = &states[b];
        let mut norms = BTreeMap::new();
        for pair in &pairs {
            let gated = match aggregate_gated(h, meta, std::slice::from_ref(pair), &bw.afca) {
                Ok(g) => g,
                Err(e) => return fail(EXIT_CONTRACT, format!("aggregation failed: {e}")),
            };
            norms.insert(pair.0.identity_id.clone(), frobenius(&(gated - h)));
        }
        blocks.push(BlockTrace {
            block: b,
            contribution_norms: norms,
        });
    }

    // Invariance checks run on the first block's weights and input state.
    let h0 = &states[0];
    let afca0 = &model.weights.blocks[0].afca;
    let mut checks = Vec::new();

    match aggregate_gated(h0, meta, &[], afca0) {
        Ok(no_streams) => {
            let diff = max_abs_diff(&no_streams, h0);
            checks.push(CheckResult {
                name: "empty-stream-identity".into(),
                max_abs_diff: diff,
                tolerance: 0.0,
                pass: diff == 0.0,
            });
        }
        Err(e) => return fail(EXIT_CONTRACT, format!("aggregation failed: {e}")),
    }

    let reversed: Vec<_> = pairs.iter().rev().cloned().collect();
    match (
        aggregate_gated(h0, meta, &pairs, afca0),
        aggregate_gated(h0, meta, &reversed, afca0),
    ) {
        (Ok(forward), Ok(backward)) => {
            let diff = max_abs_diff(&forward, &backward);
            checks.push(CheckResult {
                name: "permutation-invariance".into(),
                max_abs_diff: diff,
                tolerance: PERMUTATION_TOL,
                pass: diff <= PERMUTATION_TOL,
            });
        }
        (Err(e), _) | (_, Err(e)) => return fail(EXIT_CONTRACT, format!("aggregation failed: {e}")),
    }

    let zero_mask = match TokenMask::<f64>::from_frame_values(
        Array1::zeros(meta.rows * meta.cols),
        meta.t_lat,
        meta.rows,
        meta.cols,
    ) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONTRACT, format!("cannot build zero mask: {e}")),
    };
    for stream in &inputs.streams {
        match aggregate_gated(h0, meta, &[(stream, &zero_mask)], afca0) {
            Ok(nulled) => {
                let diff = max_abs_diff(&nulled, h0);
                checks.push(CheckResult {
                    name: format!("zero-mask-nullification[{}]", stream.identity_id),
                    max_abs_diff: diff,
                    tolerance: 0.0,
                    pass: diff == 0.0,
                });
            }
            Err(e) => return fail(EXIT_CONTRACT, format!("aggregation failed: {e}")),
        }
    }

    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    let n_checks = checks.len();
    let trace = DemoTrace {
        seed: cfg.seed,
        weights: weights_desc,
        identities: inputs.streams.iter().map(|s| s.identity_id.clone()).collect(),
        frame: [CROP_H, CROP_W * cfg.demo_identities],
        grid: [meta.t_lat, meta.rows, meta.cols],
        timestep,
        blocks,
        checks,
    };
    if let Err(m) = write_json(&out.join("demo_trace.json"), &trace) {
        return fail(EXIT_IO, m);
    }

    if failed.is_empty() {
        println!("demo-forward: {n_checks} checks passed");
        EXIT_OK
    } else {
        fail(EXIT_INVARIANCE, format!("invariance checks failed: {}", failed.join(", ")))
    }
}
