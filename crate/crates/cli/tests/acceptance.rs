//! The acceptance gate: one test per shipping criterion, each printing a
//! PASS line with its measured numbers (visible under --nocapture). Every
//! oracle here is computed independently of the code under test.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;
use statrs::distribution::{Binomial, DiscreteCDF};
use tempfile::TempDir;

use afca_core::afca::grad::{aggregate_backward, aggregate_with_cache};
use afca_core::afca::{
    audio_face_kv, build_temporal_mask, masked_mhca, AfcaWeights, AudioTokenStream, FaceTokens,
    IdentityStream, AUDIO_TOKENS_PER_FRAME,
};
use afca_core::augment::{
    hconcat_pair, select_batch_mode, BatchMode, ClipSample, ClipSpeaker, CROP_H, CROP_W,
};
use afca_core::curation::{check_sync_matrix, curate_corpus, CurationConfig, SyncMatrix};
use afca_core::grid::{GridMeta, VideoTokenGrid};
use afca_core::mask::{
    token_mask_from_bbox, Bbox, FaceTrack, FrameDims, PadPolicy, PatchSpec, PixelMask, TokenMask,
};
use afca_core::metrics::{
    anomaly_clamp, interactivity, motion_score, sync_c_star, Interval, LandmarkSequence,
    SegmentAnnotation, SegmentSyncScores, SpeakerSegments,
};
use afca_core::rng::{keyed_stream, stream};
use afca_core::toy::{
    encode_inputs, guided_prediction, model_backward, model_forward, run_two_stage,
    synthetic_singles, two_stage_schedule, unconditional_inputs, SyntheticEncoder, ToyDiTConfig,
    ToyModel,
};

// -- shared helpers ---------------------------------------------------------

fn randn(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random identity stream plus a hard 0/1 token mask for a given grid.
fn random_stream(
    rng: &mut impl Rng,
    id: &str,
    meta: GridMeta,
    d_af: usize,
    audio_rows: usize,
    face_rows: usize,
) -> (IdentityStream<f64>, TokenMask<f64>) {
    let audio = AudioTokenStream::new(randn(rng, audio_rows, d_af), id).unwrap();
    let face = FaceTokens::new(randn(rng, face_rows, d_af), id).unwrap();
    let pixel = PixelMask::new(
        Bbox::new(0, 0, 4, 4).unwrap(),
        FrameDims::new(16, 16).unwrap(),
    )
    .unwrap();
    let stream = IdentityStream::new(audio, face, pixel).unwrap();
    let frame_values =
        Array1::from_shape_fn(meta.tokens_per_frame(), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let mask = TokenMask::from_frame_values(frame_values, meta.t_lat, meta.rows, meta.cols).unwrap();
    (stream, mask)
}

fn ones_mask(meta: GridMeta) -> TokenMask<f64> {
    TokenMask::from_frame_values(Array1::ones(meta.tokens_per_frame()), meta.t_lat, meta.rows, meta.cols)
        .unwrap()
}

fn zeros_mask(meta: GridMeta) -> TokenMask<f64> {
    TokenMask::from_frame_values(Array1::zeros(meta.tokens_per_frame()), meta.t_lat, meta.rows, meta.cols)
        .unwrap()
}

// -- 1: aggregation invariances ---------------------------------------------

#[test]
fn c01_afca_invariance_suite() {
    use afca_core::afca::aggregate_gated;
    let started = Instant::now();

    let meta = GridMeta::new(2, 2, 4).unwrap();
    assert!(meta.n_tokens() <= 32);
    let d_model = 16;
    let d_af = 8;
    let mut rng = stream(101, "acceptance-invariance");
    let weights = AfcaWeights::<f64>::random(d_model, d_af, 4, 4, 4, &mut rng).unwrap();
    let h = randn(&mut rng, meta.n_tokens(), d_model);

    let built: Vec<(IdentityStream<f64>, TokenMask<f64>)> = (0..4)
        .map(|i| {
            let audio_rows = AUDIO_TOKENS_PER_FRAME * meta.t_lat + i % 2;
            random_stream(&mut rng, &format!("id{i}"), meta, d_af, audio_rows, 1 + i % 2)
        })
        .collect();
    let pairs: Vec<(&IdentityStream<f64>, &TokenMask<f64>)> =
        built.iter().map(|(s, m)| (s, m)).collect();

    // Stream order never changes the sum of gated contributions.
    let forward = aggregate_gated(&h, meta, &pairs, &weights).unwrap();
    let reversed: Vec<_> = pairs.iter().rev().cloned().collect();
    let backward = aggregate_gated(&h, meta, &reversed, &weights).unwrap();
    let perm_diff = max_abs_diff(&forward, &backward);
    assert!(perm_diff <= 1e-6, "permutation diff {perm_diff}");

    // A zero mask removes its stream's contribution exactly.
    let null = zeros_mask(meta);
    let with_nulled = aggregate_gated(
        &h,
        meta,
        &[pairs[0], (pairs[1].0, &null), pairs[2]],
        &weights,
    )
    .unwrap();
    let without = aggregate_gated(&h, meta, &[pairs[0], pairs[2]], &weights).unwrap();
    assert_eq!(with_nulled, without);
    let only_nulled = aggregate_gated(&h, meta, &[(pairs[1].0, &null)], &weights).unwrap();
    assert_eq!(only_nulled, h);

    // One identity with an all-ones gate is the residual plus plain MHCA.
    let ones = ones_mask(meta);
    let single = aggregate_gated(&h, meta, &[(pairs[0].0, &ones)], &weights).unwrap();
    let stream0 = pairs[0].0;
    let t_mask =
        build_temporal_mask(meta.t_lat, stream0.audio.len(), stream0.face.len()).unwrap();
    let (k, v) = audio_face_kv(stream0, &weights).unwrap();
    let grid = VideoTokenGrid::unflatten(h.clone(), meta).unwrap();
    let plain = masked_mhca(&grid, &k, &v, &t_mask, &weights).unwrap();
    let reduction_diff = max_abs_diff(&single, &(&h + &plain));
    assert!(reduction_diff <= 1e-6, "reduction diff {reduction_diff}");

    // Disjoint gates keep every token row equal to the row the sole
    // covering stream would produce alone.
    let left = TokenMask::from_frame_values(
        Array1::from_shape_fn(meta.tokens_per_frame(), |i| if i < 4 { 1.0 } else { 0.0 }),
        meta.t_lat,
        meta.rows,
        meta.cols,
    )
    .unwrap();
    let right = TokenMask::from_frame_values(
        Array1::from_shape_fn(meta.tokens_per_frame(), |i| if i >= 4 { 1.0 } else { 0.0 }),
        meta.t_lat,
        meta.rows,
        meta.cols,
    )
    .unwrap();
    let both = aggregate_gated(&h, meta, &[(pairs[0].0, &left), (pairs[1].0, &right)], &weights)
        .unwrap();
    let only_left = aggregate_gated(&h, meta, &[(pairs[0].0, &left)], &weights).unwrap();
    let only_right = aggregate_gated(&h, meta, &[(pairs[1].0, &right)], &weights).unwrap();
    for n in 0..meta.n_tokens() {
        if left.values()[n] == 1.0 {
            assert_eq!(both.row(n), only_left.row(n), "token {n}");
        } else {
            assert_eq!(both.row(n), only_right.row(n), "token {n}");
        }
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "invariance suite took {secs:.1}s");
    println!("PASS afca invariance: permutation {perm_diff:.2e}, reduction {reduction_diff:.2e}, nullification and locality exact ({secs:.2}s)");
}

// -- 2: attention against a brute-force loop --------------------------------

/// Reference attention: per query row, softmax over the allowed keys only,
/// written as explicit loops with no shared code.
fn oracle_mhca(
    h_flat: &Array2<f64>,
    tokens_per_frame: usize,
    audio_rows: usize,
    k_af: &Array2<f64>,
    v_af: &Array2<f64>,
    w: &AfcaWeights<f64>,
) -> Array2<f64> {
    let q = h_flat.dot(&w.w_q);
    let heads = w.heads;
    let d_k = w.w_q.ncols() / heads;
    let d_v = w.w_v.ncols() / heads;
    let n = h_flat.nrows();
    let m = k_af.nrows();
    let allowed = |row: usize, key: usize| -> bool {
        if key >= audio_rows {
            return true;
        }
        let frame = row / tokens_per_frame;
        if frame == 0 {
            return true;
        }
        let lo = AUDIO_TOKENS_PER_FRAME * (frame - 1);
        let hi = (AUDIO_TOKENS_PER_FRAME * frame).min(audio_rows);
        key >= lo && key < hi
    };
    let mut ctx = Array2::zeros((n, d_v * heads));
    for head in 0..heads {
        for i in 0..n {
            let mut logits: Vec<(usize, f64)> = Vec::new();
            for j in 0..m {
                if !allowed(i, j) {
                    continue;
                }
                let mut dot = 0.0;
                for c in 0..d_k {
                    dot += q[(i, head * d_k + c)] * k_af[(j, head * d_k + c)];
                }
                logits.push((j, dot / (d_k as f64).sqrt()));
            }
            let max = logits.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|(_, l)| (l - max).exp()).sum();
            for (j, l) in logits {
                let p = (l - max).exp() / denom;
                for c in 0..d_v {
                    ctx[(i, head * d_v + c)] += p * v_af[(j, head * d_v + c)];
                }
            }
        }
    }
    ctx.dot(&w.w_o)
}

#[test]
fn c02_attention_matches_brute_force() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for instance in 0..100u64 {
        let mut rng = stream(instance, "acceptance-attn-oracle");
        let t_lat = rng.gen_range(1..=4);
        let rows = rng.gen_range(1..=3);
        let cols = rng.gen_range(1..=3);
        let meta = GridMeta::new(t_lat, rows, cols).unwrap();
        let (d_model, heads) = [(16, 4), (8, 2), (12, 3)][rng.gen_range(0..3)];
        let d_k = rng.gen_range(2..=5);
        let d_v = rng.gen_range(2..=5);
        let d_af = rng.gen_range(4..=9);
        let audio_rows = (AUDIO_TOKENS_PER_FRAME * (t_lat - 1) + rng.gen_range(0..=5)).max(1);
        let face_rows = rng.gen_range(1..=2);

        let weights = AfcaWeights::<f64>::random(d_model, d_af, d_k, d_v, heads, &mut rng).unwrap();
        let (s, _) = random_stream(&mut rng, "o", meta, d_af, audio_rows, face_rows);
        let h = randn(&mut rng, meta.n_tokens(), d_model);
        let grid = VideoTokenGrid::unflatten(h.clone(), meta).unwrap();

        let t_mask = build_temporal_mask(t_lat, audio_rows, face_rows).unwrap();
        let (k, v) = audio_face_kv(&s, &weights).unwrap();
        let got = masked_mhca(&grid, &k, &v, &t_mask, &weights).unwrap();
        let want = oracle_mhca(&h, meta.tokens_per_frame(), audio_rows, &k, &v, &weights);
        let diff = max_abs_diff(&got, &want);
        assert!(diff <= 1e-6, "instance {instance}: diff {diff}");
        worst = worst.max(diff);
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "attention oracle took {secs:.1}s");
    println!("PASS attention oracle: 100 instances, worst diff {worst:.2e} ({secs:.2}s)");
}

// -- 3: gradients against central finite differences ------------------------

fn rel_check(analytic: f64, fd: f64, what: &str) -> f64 {
    if analytic.abs() < 1e-7 && fd.abs() < 1e-7 {
        return 0.0;
    }
    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
    assert!(rel < 1e-4, "{what}: analytic {analytic:.9e}, fd {fd:.9e}, rel {rel:.3e}");
    rel
}

fn direction(seed: u64, name: &str, shape: &[usize]) -> ArrayD<f64> {
    let mut rng = keyed_stream(seed, "fd-direction", name);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample(StandardNormal))
}

fn dot_dyn(grad: &ndarray::ArrayViewD<'_, f64>, dir: &ArrayD<f64>) -> f64 {
    grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum()
}

const FD_EPS: f64 = 1e-5;

fn afca_gradient_instance(instance: u64) -> f64 {
    let mut rng = stream(instance, "acceptance-afca-grad");
    let t_lat = rng.gen_range(1..=3);
    let meta = GridMeta::new(t_lat, 2, rng.gen_range(2..=3)).unwrap();
    let d_model = 8;
    let d_af = 6;
    let weights =
        AfcaWeights::<f64>::random(d_model, d_af, 3, 4, 2, &mut rng).unwrap();
    let audio_rows = AUDIO_TOKENS_PER_FRAME * t_lat;
    let n_streams = 1 + (instance % 2) as usize;
    let built: Vec<(IdentityStream<f64>, TokenMask<f64>)> = (0..n_streams)
        .map(|i| random_stream(&mut rng, &format!("g{i}"), meta, d_af, audio_rows, 1 + i))
        .collect();
    let h = randn(&mut rng, meta.n_tokens(), d_model);
    let r = randn(&mut rng, meta.n_tokens(), d_model);

    let loss = |h: &Array2<f64>, streams: &[(IdentityStream<f64>, TokenMask<f64>)], w: &AfcaWeights<f64>| {
        let pairs: Vec<_> = streams.iter().map(|(s, m)| (s, m)).collect();
        let (out, _) = aggregate_with_cache(h, meta, &pairs, w).unwrap();
        (&out * &r).sum()
    };

    let pairs: Vec<_> = built.iter().map(|(s, m)| (s, m)).collect();
    let (_, cache) = aggregate_with_cache(&h, meta, &pairs, &weights).unwrap();
    let grads = aggregate_backward(&cache, &r);

    let mut worst: f64 = 0.0;
    let mut check = |name: &str,
                     analytic: f64,
                     perturb: &mut dyn FnMut(f64) -> f64| {
        let plus = perturb(FD_EPS);
        let minus = perturb(-FD_EPS);
        let fd = (plus - minus) / (2.0 * FD_EPS);
        worst = worst.max(rel_check(analytic, fd, &format!("afca {instance} {name}")));
    };

    let u_h = direction(instance, "h", &[h.nrows(), h.ncols()]);
    check("h", dot_dyn(&grads.d_h_in.view().into_dyn(), &u_h), &mut |e| {
        let mut hp = h.clone();
        hp.zip_mut_with(&u_h, |x, d| *x += e * d);
        loss(&hp, &built, &weights)
    });

    for (name, grad, pick) in [
        ("w_q", &grads.d_weights.d_w_q, 0usize),
        ("w_k", &grads.d_weights.d_w_k, 1),
        ("w_v", &grads.d_weights.d_w_v, 2),
        ("w_o", &grads.d_weights.d_w_o, 3),
    ] {
        let u = direction(instance, name, &[grad.nrows(), grad.ncols()]);
        check(name, dot_dyn(&grad.view().into_dyn(), &u), &mut |e| {
            let mut w = weights.clone();
            let target = match pick {
                0 => &mut w.w_q,
                1 => &mut w.w_k,
                2 => &mut w.w_v,
                _ => &mut w.w_o,
            };
            target.zip_mut_with(&u, |x, d| *x += e * d);
            loss(&h, &built, &w)
        });
    }

    for (j, sg) in grads.streams.iter().enumerate() {
        assert_eq!(sg.identity_id, built[j].0.identity_id);
        let ua = direction(instance, &format!("audio{j}"), &[sg.d_audio.nrows(), sg.d_audio.ncols()]);
        check(&format!("audio{j}"), dot_dyn(&sg.d_audio.view().into_dyn(), &ua), &mut |e| {
            let mut streams = built.clone();
            streams[j].0.audio.tokens.zip_mut_with(&ua, |x, d| *x += e * d);
            loss(&h, &streams, &weights)
        });
        let uf = direction(instance, &format!("face{j}"), &[sg.d_face.nrows(), sg.d_face.ncols()]);
        check(&format!("face{j}"), dot_dyn(&sg.d_face.view().into_dyn(), &uf), &mut |e| {
            let mut streams = built.clone();
            streams[j].0.face.tokens.zip_mut_with(&uf, |x, d| *x += e * d);
            loss(&h, &streams, &weights)
        });
    }
    worst
}

fn grad_check_config() -> ToyDiTConfig {
    ToyDiTConfig {
        depth: 2,
        d_model: 16,
        heads: 2,
        d_af: 8,
        d_ff: 32,
        frame_count: 5,
        l_text: 8,
        l_ref: 2,
        l_face: 2,
        diffusion_steps: 10,
        ..ToyDiTConfig::default()
    }
}

fn model_gradient_instance(instance: u64) -> f64 {
    let cfg = grad_check_config();
    let model = ToyModel::<f64>::init(cfg.clone(), 1000 + instance).unwrap();
    let encoder = SyntheticEncoder::new(2000 + instance, cfg.clone()).unwrap();
    let corpus = synthetic_singles::<f64>(&cfg, 2, 3000 + instance).unwrap();
    let sample = if instance % 2 == 0 {
        corpus[0].clone()
    } else {
        hconcat_pair(&corpus[0], &corpus[1]).unwrap()
    };
    let inputs = encode_inputs(&sample, &encoder).unwrap();
    let meta = inputs.meta();

    let mut rng = stream(4000 + instance, "acceptance-model-grad");
    let x = randn(&mut rng, meta.n_tokens(), cfg.d_model);
    let r = randn(&mut rng, meta.n_tokens(), cfg.d_model);
    let t = (instance as usize * 3) % cfg.diffusion_steps;

    let loss = |m: &ToyModel<f64>, inp: &afca_core::toy::ModelInputs<f64>, x: &Array2<f64>| {
        let (eps, _) = model_forward(m, inp, x, t).unwrap();
        (&eps * &r).sum()
    };

    let (_, cache) = model_forward(&model, &inputs, &x, t).unwrap();
    let grads = model_backward(&model, &inputs, &cache, &r);

    let mut worst: f64 = 0.0;
    let mut check = |name: &str, analytic: f64, perturb: &mut dyn FnMut(f64) -> f64| {
        let fd = (perturb(FD_EPS) - perturb(-FD_EPS)) / (2.0 * FD_EPS);
        worst = worst.max(rel_check(analytic, fd, &format!("model {instance} {name}")));
    };

    // Every named parameter tensor, walked in checkpoint order.
    let names: Vec<(String, Vec<usize>)> = grads
        .weights
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.as_dyn().shape().to_vec()))
        .collect();
    for (name, shape) in &names {
        let u = direction(instance, name, shape);
        let analytic = {
            let tensors = grads.weights.tensors();
            let (_, t) = tensors.iter().find(|(n, _)| n == name).unwrap();
            dot_dyn(&t.as_dyn(), &u)
        };
        check(name, analytic, &mut |e| {
            let mut m = model.clone();
            for (n, mut t) in m.weights.tensors_mut() {
                if &n == name {
                    t.as_dyn_mut().zip_mut_with(&u, |x, d| *x += e * d);
                }
            }
            loss(&m, &inputs, &x)
        });
    }

    let u_x = direction(instance, "input.x", &[x.nrows(), x.ncols()]);
    check("input.x", dot_dyn(&grads.d_x.view().into_dyn(), &u_x), &mut |e| {
        let mut xp = x.clone();
        xp.zip_mut_with(&u_x, |v, d| *v += e * d);
        loss(&model, &inputs, &xp)
    });
    let u_text = direction(instance, "input.text", &[inputs.f_text.nrows(), inputs.f_text.ncols()]);
    check("input.text", dot_dyn(&grads.d_f_text.view().into_dyn(), &u_text), &mut |e| {
        let mut inp = inputs.clone();
        inp.f_text.zip_mut_with(&u_text, |v, d| *v += e * d);
        loss(&model, &inp, &x)
    });
    let u_ref = direction(instance, "input.ref", &[inputs.f_ref.nrows(), inputs.f_ref.ncols()]);
    check("input.ref", dot_dyn(&grads.d_f_ref.view().into_dyn(), &u_ref), &mut |e| {
        let mut inp = inputs.clone();
        inp.f_ref.zip_mut_with(&u_ref, |v, d| *v += e * d);
        loss(&model, &inp, &x)
    });
    for j in 0..inputs.streams.len() {
        let sg = &grads.streams[j];
        let ua = direction(instance, &format!("input.audio{j}"), &[sg.d_audio.nrows(), sg.d_audio.ncols()]);
        check(&format!("input.audio{j}"), dot_dyn(&sg.d_audio.view().into_dyn(), &ua), &mut |e| {
            let mut inp = inputs.clone();
            inp.streams[j].audio.tokens.zip_mut_with(&ua, |v, d| *v += e * d);
            loss(&model, &inp, &x)
        });
        let uf = direction(instance, &format!("input.face{j}"), &[sg.d_face.nrows(), sg.d_face.ncols()]);
        check(&format!("input.face{j}"), dot_dyn(&sg.d_face.view().into_dyn(), &uf), &mut |e| {
            let mut inp = inputs.clone();
            inp.streams[j].face.tokens.zip_mut_with(&uf, |v, d| *v += e * d);
            loss(&model, &inp, &x)
        });
    }
    worst
}

#[test]
fn c03_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for instance in 0..10 {
        worst = worst.max(afca_gradient_instance(instance));
    }
    for instance in 0..10 {
        worst = worst.max(model_gradient_instance(instance));
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient checks took {secs:.1}s");
    println!("PASS gradient checks: 20 instances, worst rel err {worst:.2e} ({secs:.2}s)");
}

// -- 4: temporal mask against case enumeration ------------------------------

#[test]
fn c04_temporal_mask_matches_enumeration() {
    let started = Instant::now();
    let mut valid = 0usize;
    let mut invalid = 0usize;
    for t_lat in 0..=8usize {
        for a in 0..=40usize {
            for f in 0..=2usize {
                let result = build_temporal_mask(t_lat, a, f);
                let must_fail = t_lat == 0 || a == 0 || a < 4 * t_lat.saturating_sub(1);
                if must_fail {
                    assert!(result.is_err(), "({t_lat}, {a}, {f}) should be rejected");
                    invalid += 1;
                    continue;
                }
                let mask = result.unwrap_or_else(|e| panic!("({t_lat}, {a}, {f}): {e}"));
                assert_eq!(mask.audio_cols(), a);
                assert_eq!(mask.face_cols(), f);
                let expected = Array2::from_shape_fn((t_lat, a + f), |(t, j)| {
                    if j >= a {
                        true
                    } else if t == 0 {
                        true
                    } else {
                        j >= 4 * (t - 1) && j < (4 * t).min(a)
                    }
                });
                assert_eq!(mask.allow(), &expected, "({t_lat}, {a}, {f})");
                valid += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 5.0, "temporal mask enumeration took {secs:.1}s");
    println!("PASS temporal mask: {valid} grids exact, {invalid} invalid triples rejected ({secs:.2}s)");
}

// -- 5: token mask against per-pixel rasterization --------------------------

#[test]
fn c05_token_mask_matches_rasterization() {
    let mut rng = stream(55, "acceptance-token-mask");
    let mut strict_checked = 0usize;
    for case in 0..1000 {
        let h = rng.gen_range(1..=48usize);
        let w = rng.gen_range(1..=48usize);
        let p_h = rng.gen_range(1..=8usize);
        let p_w = rng.gen_range(1..=8usize);
        let x0 = rng.gen_range(0..w);
        let x1 = rng.gen_range(x0 + 1..=w);
        let y0 = rng.gen_range(0..h);
        let y1 = rng.gen_range(y0 + 1..=h);
        let t_lat = rng.gen_range(1..=3usize);
        let mask = PixelMask::new(Bbox::new(x0, y0, x1, y1).unwrap(), FrameDims::new(h, w).unwrap())
            .unwrap();
        let patch = PatchSpec::new(p_h, p_w).unwrap();

        // Reference: paint the box pixel by pixel onto the padded canvas,
        // then OR-reduce each patch footprint.
        let rows = h.div_ceil(p_h);
        let cols = w.div_ceil(p_w);
        let mut painted = vec![false; rows * p_h * cols * p_w];
        for y in y0..y1 {
            for x in x0..x1 {
                painted[y * cols * p_w + x] = true;
            }
        }
        let mut frame = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let mut any = false;
                for y in r * p_h..(r + 1) * p_h {
                    for x in c * p_w..(c + 1) * p_w {
                        any |= painted[y * cols * p_w + x];
                    }
                }
                frame[r * cols + c] = any;
            }
        }
        let expected: Vec<f64> = (0..t_lat)
            .flat_map(|_| frame.iter().map(|b| if *b { 1.0 } else { 0.0 }))
            .collect();

        let tm = token_mask_from_bbox::<f64>(&mask, t_lat, patch, PadPolicy::ZeroPad)
            .unwrap_or_else(|e| panic!("case {case}: {e}"));
        assert_eq!(tm.values().to_vec(), expected, "case {case} ({h}x{w}, patch {p_h}x{p_w})");

        if h % p_h == 0 && w % p_w == 0 {
            let strict = token_mask_from_bbox::<f64>(&mask, t_lat, patch, PadPolicy::Strict).unwrap();
            assert_eq!(strict.values().to_vec(), expected, "strict case {case}");
            strict_checked += 1;
        }
    }
    println!("PASS token mask: 1000 rasterized cases exact ({strict_checked} also under the strict policy)");
}

// -- 6: metric goldens and convex bounds ------------------------------------

fn seq_from_x(xs: &[f64], fps: f64) -> LandmarkSequence<f64> {
    let points = Array3::from_shape_fn((xs.len(), 1, 2), |(j, _, c)| if c == 0 { xs[j] } else { 0.0 });
    LandmarkSequence::new(points, fps).unwrap()
}

fn split_annotation(n: usize, k: usize) -> SegmentAnnotation {
    SegmentAnnotation::new([
        SpeakerSegments {
            id: 0,
            speaking: vec![Interval::new(0, k).unwrap()],
            listening: vec![Interval::new(k, n).unwrap()],
        },
        SpeakerSegments {
            id: 1,
            speaking: vec![Interval::new(k, n).unwrap()],
            listening: vec![Interval::new(0, k).unwrap()],
        },
    ])
    .unwrap()
}

#[test]
fn c06_metric_goldens_and_bounds() {
    // Hand-traced motion: displacements 2.5 then 5.0 over three frames.
    let mut pts: Array3<f64> = Array3::zeros((3, 2, 2));
    pts[(1, 0, 0)] = 3.0;
    pts[(1, 0, 1)] = 4.0;
    pts[(2, 0, 0)] = 3.0;
    pts[(2, 0, 1)] = 4.0;
    pts[(2, 1, 0)] = 6.0;
    pts[(2, 1, 1)] = 8.0;
    let seq = LandmarkSequence::new(pts, 24.0).unwrap();
    let motion = motion_score(&seq).unwrap();
    assert!((motion - 3.75).abs() <= 1e-9, "motion {motion}");

    // Hand-traced clamp: a spike freezes, a return re-accepts, and later
    // jumps are judged against the re-accepted frame.
    let clamped = anomaly_clamp(&seq_from_x(&[0.0, 100.0, 1.0, 20.0, 12.0], 24.0), 10.0);
    let got: Vec<f64> = (0..5).map(|j| clamped.points()[(j, 0, 0)]).collect();
    assert_eq!(got, vec![0.0, 0.0, 1.0, 1.0, 1.0]);

    // Hand-traced interactivity: listener motions 1 and 3 over equal spans.
    let seq_a = seq_from_x(&[5.0, 5.0, 5.0, 5.0, 5.0, 8.0, 11.0, 14.0], 24.0);
    let seq_b = seq_from_x(&[0.0, 1.0, 2.0, 3.0, 3.0, 3.0, 3.0, 3.0], 24.0);
    let ann = split_annotation(8, 4);
    let inter = interactivity(&seq_a, &seq_b, &ann).unwrap();
    assert!((inter - 2.0).abs() <= 1e-9, "interactivity {inter}");

    // Hand-traced sync aggregate: (7*8 + 2*1) / 9.
    let ann_sync = SegmentAnnotation::new([
        SpeakerSegments {
            id: 0,
            speaking: vec![Interval::new(0, 3).unwrap(), Interval::new(5, 9).unwrap()],
            listening: vec![Interval::new(3, 5).unwrap()],
        },
        SpeakerSegments {
            id: 1,
            speaking: vec![Interval::new(3, 5).unwrap()],
            listening: vec![Interval::new(0, 3).unwrap(), Interval::new(5, 9).unwrap()],
        },
    ])
    .unwrap();
    let scores = SegmentSyncScores::new(8.0, 1.0).unwrap();
    let sync = sync_c_star(&scores, &ann_sync).unwrap();
    assert!((sync - 58.0 / 9.0).abs() <= 1e-9, "sync {sync}");

    // Both aggregates are convex combinations: 10,000 fuzzed inputs each
    // must land between the two phase values.
    let mut rng = stream(66, "acceptance-metric-fuzz");
    for case in 0..10_000 {
        let l1 = rng.gen_range(0..=20usize);
        let l4 = rng.gen_range(0..=20usize);
        if l1 + l4 == 0 {
            continue;
        }
        let s1 = rng.gen_range(-10.0..10.0);
        let s4 = rng.gen_range(-10.0..10.0);
        let ann = SegmentAnnotation::new([
            SpeakerSegments {
                id: 0,
                speaking: if l1 > 0 { vec![Interval::new(0, l1).unwrap()] } else { vec![] },
                listening: vec![],
            },
            SpeakerSegments {
                id: 1,
                speaking: if l4 > 0 { vec![Interval::new(0, l4).unwrap()] } else { vec![] },
                listening: vec![],
            },
        ])
        .unwrap();
        let v = sync_c_star(&SegmentSyncScores::new(s1, s4).unwrap(), &ann).unwrap();
        let (lo, hi) = (s1.min(s4), s1.max(s4));
        assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "sync case {case}: {v} outside [{lo}, {hi}]");
    }
    for case in 0..10_000 {
        let n = rng.gen_range(5..=30usize);
        let k = rng.gen_range(2..=n - 2);
        let m_a: f64 = rng.gen_range(0.0..5.0);
        let m_b: f64 = rng.gen_range(0.0..5.0);
        let xs_a: Vec<f64> = (0..n).map(|j| j as f64 * m_a).collect();
        let xs_b: Vec<f64> = (0..n).map(|j| j as f64 * m_b).collect();
        let v = interactivity(&seq_from_x(&xs_a, 24.0), &seq_from_x(&xs_b, 24.0), &split_annotation(n, k))
            .unwrap();
        let (lo, hi) = (m_a.min(m_b), m_a.max(m_b));
        assert!(
            v >= lo - 1e-9 && v <= hi + 1e-9,
            "interactivity case {case}: {v} outside [{lo}, {hi}]"
        );
    }
    println!("PASS metric goldens: four hand traces within 1e-9, 20000 fuzzed aggregates inside their convex bounds");
}

// -- 7: two-stage schedule statistics ---------------------------------------

fn coin_sample(id: &str, x0: usize) -> ClipSample<f64> {
    let dims = FrameDims::new(CROP_H, CROP_W).unwrap();
    let track = FaceTrack::new(id, dims, vec![Bbox::new(x0, 100, x0 + 100, 220).unwrap()]).unwrap();
    let speaker = ClipSpeaker {
        identity_id: id.to_string(),
        audio: Array2::from_elem((4, 4), 0.1),
        face_track: track,
    };
    ClipSample::new(dims, 1, 24, "coin", vec![speaker]).unwrap()
}

#[test]
fn c07_schedule_statistics() {
    // The stage-one batch coin must be fair: a two-sided binomial test on
    // 10,000 draws at alpha 0.01.
    let a = coin_sample("coin-a", 50);
    let b = coin_sample("coin-b", 80);
    let mut rng = stream(77, "acceptance-batch-coin");
    let mut paired = 0u64;
    let draws = 10_000u64;
    for _ in 0..draws {
        let batch = select_batch_mode(vec![a.clone(), b.clone()], &mut rng).unwrap();
        if batch.mode == BatchMode::Paired {
            paired += 1;
        }
    }
    let dist = Binomial::new(0.5, draws).unwrap();
    let p_low = dist.cdf(paired);
    let p_high = 1.0 - if paired == 0 { 0.0 } else { dist.cdf(paired - 1) };
    let p_value = (2.0 * p_low.min(p_high)).min(1.0);
    assert!(
        p_value > 0.01,
        "paired {paired}/{draws} rejects the fair coin (p = {p_value:.4})"
    );

    // The learning rate holds 2e-5 through stage one and lands on 5e-6
    // after the stage-two warm-up, in the plan and in a real log.
    let plan = two_stage_schedule(&ToyDiTConfig::default());
    assert_eq!(plan.lr_at(0), 2e-5);
    assert_eq!(plan.lr_at(119), 2e-5);
    assert!((plan.lr_at(120) - 5e-7).abs() < 1e-18, "first warm-up step {}", plan.lr_at(120));
    assert_eq!(plan.lr_at(129), 5e-6);
    assert_eq!(plan.lr_at(199), 5e-6);

    let cfg = ToyDiTConfig {
        stage1_steps: 3,
        stage2_steps: 4,
        warmup_steps: 2,
        batch_size: 2,
        ..grad_check_config()
    };
    let model = ToyModel::<f32>::init(cfg.clone(), 7).unwrap();
    let encoder = SyntheticEncoder::new(7, cfg.clone()).unwrap();
    let corpus = synthetic_singles::<f32>(&cfg, 4, 7).unwrap();
    let (_, log) = run_two_stage(model, &corpus, &encoder, 7).unwrap();
    let tiny_plan = two_stage_schedule(&cfg);
    let logged: Vec<f64> = log.records.iter().map(|rec| rec.lr).collect();
    let planned: Vec<f64> = (0..logged.len()).map(|g| tiny_plan.lr_at(g)).collect();
    assert_eq!(logged, planned);
    assert_eq!(&logged[..3], &[2e-5, 2e-5, 2e-5]);
    assert_eq!(&logged[3..], &[2.5e-6, 5e-6, 5e-6, 5e-6]);

    println!("PASS schedule stats: paired {paired}/{draws} (p = {p_value:.3}), lr 2e-5 -> 5e-6 as logged");
}

// -- 8: training smoke -------------------------------------------------------

#[test]
fn c08_toy_training_smoke() {
    let started = Instant::now();
    let cfg = ToyDiTConfig::default();
    assert_eq!(cfg.stage1_steps + cfg.stage2_steps, 200);
    let model = ToyModel::<f32>::init(cfg.clone(), 42).unwrap();
    let encoder = SyntheticEncoder::new(42, cfg.clone()).unwrap();
    let corpus = synthetic_singles::<f32>(&cfg, 8, 42).unwrap();
    let (state, log) = run_two_stage(model, &corpus, &encoder, 42).unwrap();
    assert_eq!(log.records.len(), 200);
    let head = log.head_mean(20);
    let tail = log.tail_mean(20);
    assert!(
        tail < head,
        "smoothed loss did not fall: first 20 steps {head:.6}, last 20 {tail:.6}"
    );

    // Guidance collapses to the branch predictions at scales 0 and 1, and
    // interpolates linearly elsewhere, on the trained model's outputs.
    let inputs = encode_inputs(&corpus[0], &encoder).unwrap();
    let uncond_inputs = unconditional_inputs(&inputs);
    let meta = inputs.meta();
    let mut rng = stream(43, "acceptance-smoke-x");
    let x = Array2::from_shape_fn((meta.n_tokens(), cfg.d_model), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v as f32
    });
    let t = cfg.diffusion_steps / 2;
    let (e_cond, _) = model_forward(&state.model, &inputs, &x, t).unwrap();
    let (e_uncond, _) = model_forward(&state.model, &uncond_inputs, &x, t).unwrap();
    assert_ne!(e_cond, e_uncond, "conditioning has no effect");
    assert_eq!(guided_prediction(&e_uncond, &e_cond, 0.0), e_uncond);
    assert_eq!(guided_prediction(&e_uncond, &e_cond, 1.0), e_cond);
    let mid = guided_prediction(&e_uncond, &e_cond, 2.0);
    let manual = &e_uncond + &(&e_cond - &e_uncond).mapv(|v| v * 2.0);
    let mid_diff = mid
        .iter()
        .zip(manual.iter())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    assert!(mid_diff <= 1e-5, "guidance interpolation diff {mid_diff}");

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "training smoke took {secs:.1}s");
    println!("PASS training smoke: 200 steps, loss {head:.4} -> {tail:.4}, guidance collapses at scales 0 and 1 ({secs:.1}s)");
}

// -- 9: curation against a sort-based oracle --------------------------------

/// Independent admission rule: sort all four entries; accept only when the
/// top two slots are the diagonal cells with a strict gap to third place
/// and the weaker diagonal entry clears the threshold.
fn oracle_accept(scores: [[f64; 2]; 2], min_score: f64) -> bool {
    let mut entries = vec![
        (scores[0][0], true),
        (scores[1][1], true),
        (scores[0][1], false),
        (scores[1][0], false),
    ];
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    entries[0].1 && entries[1].1 && entries[1].0 > entries[2].0 && entries[1].0 >= min_score
}

fn fixture_track(cx: usize) -> serde_json::Value {
    json!({
        "identity_id": "t",
        "frame_dims": {"h_px": 480, "w_px": 832},
        "boxes": (0..4).map(|_| json!({"x0": cx - 10, "y0": 100, "x1": cx + 10, "y1": 140})).collect::<Vec<_>>()
    })
}

fn fixture_clip(id: &str) -> serde_json::Value {
    json!({
        "clip_id": id,
        "duration_s": 10.0,
        "face_count_histogram": {"2": 100},
        "tracks": [fixture_track(100), fixture_track(500)],
        "mean_flow": 1.0,
        "sync": {"scores": [[7.0, 2.0], [3.0, 8.0]]},
        "diarization": {"segments": [
            {"start_s": 0.0, "end_s": 2.0, "speakers": [0]},
            {"start_s": 2.0, "end_s": 5.0, "speakers": [1]},
            {"start_s": 5.0, "end_s": 7.0, "speakers": [0, 1]}
        ]}
    })
}

#[test]
fn c09_curation_matches_oracle() {
    // Random matrices on a half-step lattice so ties actually occur.
    let mut rng = stream(99, "acceptance-curation-oracle");
    let mut accepts = 0usize;
    for case in 0..10_000 {
        let scores = [
            [rng.gen_range(-6..=12) as f64 * 0.5, rng.gen_range(-6..=12) as f64 * 0.5],
            [rng.gen_range(-6..=12) as f64 * 0.5, rng.gen_range(-6..=12) as f64 * 0.5],
        ];
        let min_score = rng.gen_range(8..=11) as f64 * 0.5;
        let got = check_sync_matrix(&SyncMatrix::new(scores).unwrap(), min_score).is_accept();
        let want = oracle_accept(scores, min_score);
        assert_eq!(got, want, "case {case}: {scores:?} at {min_score}");
        accepts += got as usize;
    }
    assert!(accepts > 0, "the draw never accepted; the oracle test is vacuous");

    // A fixed corpus exercises every rule exactly once.
    let mut ok = fixture_clip("ok");
    ok["sync_min_score"] = json!(6.5);
    let mut tie = fixture_clip("tie");
    tie["sync"] = json!({"scores": [[5.0, 5.0], [2.0, 8.0]]});
    let mut weak = fixture_clip("weak");
    weak["sync"] = json!({"scores": [[4.5, 1.0], [0.5, 4.6]]});
    let mut threeway = fixture_clip("threeway");
    threeway["diarization"]["segments"][0]["speakers"] = json!([2]);
    let mut swapped = fixture_clip("swapped");
    swapped["tracks"] = json!([fixture_track(500), fixture_track(100)]);
    let mut crowded = fixture_clip("crowded");
    crowded["face_count_histogram"] = json!({"1": 40, "2": 60});
    let mut rushing = fixture_clip("rushing");
    rushing["mean_flow"] = json!(3.0);
    let mut lenient = fixture_clip("lenient");
    lenient["sync"] = json!({"scores": [[4.5, 1.0], [0.5, 4.6]]});
    lenient["sync_min_score"] = json!(4.0);

    let ndjson = [ok, tie, weak, threeway, swapped, crowded, rushing, lenient]
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("\n")
        + "\n{broken\n";
    let config = CurationConfig {
        max_mean_flow: Some(2.0),
        ..CurationConfig::default()
    };
    let run = curate_corpus(&ndjson, &config, 9);
    let verdicts: Vec<(&str, &str)> = run
        .audits
        .iter()
        .map(|a| (a.clip_id.as_str(), a.verdict.as_str()))
        .collect();
    assert_eq!(
        verdicts,
        vec![
            ("ok", "accept"),
            ("tie", "reject"),
            ("weak", "reject"),
            ("threeway", "reject"),
            ("swapped", "reject"),
            ("crowded", "reject"),
            ("rushing", "reject"),
            ("lenient", "accept"),
        ]
    );
    let rules: Vec<Vec<&str>> = run
        .audits
        .iter()
        .map(|a| a.failed_rules.iter().map(String::as_str).collect())
        .collect();
    assert_eq!(rules[1], vec!["sync-diagonal-dominance"]);
    assert_eq!(rules[2], vec!["sync-threshold"]);
    assert_eq!(rules[3], vec!["speaker-states"]);
    assert_eq!(rules[4], vec!["spatial-ordering"]);
    assert_eq!(rules[5], vec!["face-count-quorum"]);
    assert_eq!(rules[6], vec!["excessive-motion"]);
    assert_eq!(run.stats.total, 9);
    assert_eq!(run.stats.accepted, 2);
    assert_eq!(run.stats.rejected, 6);
    assert_eq!(run.stats.malformed, 1);
    assert_eq!(run.stats.rejections_by_rule.len(), 6);
    assert!(run.stats.rejections_by_rule.values().all(|&c| c == 1));
    for audit in &run.audits {
        assert_eq!(audit.verdict == "accept", !audit.chunk_plan.is_empty());
    }
    println!("PASS curation oracle: 10000 matrices agree ({accepts} accepts), fixture corpus trips every rule once");
}

// -- 10: byte-identical reruns of every subcommand ---------------------------

fn collect_files(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, root, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_afca-lab"))
        .env_remove("AFCA_LAB_THREADS")
        .args(args)
        .output()
        .unwrap();
    let code = out.status.code().unwrap();
    assert!(
        code == 0 || code == 1,
        "{args:?} exited {code}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_identical_reruns(label: &str, dir: &TempDir, args_for: impl Fn(&str) -> Vec<String>) -> usize {
    let out_a = dir.path().join(format!("{label}-a"));
    let out_b = dir.path().join(format!("{label}-b"));
    for out in [&out_a, &out_b] {
        let args: Vec<String> = args_for(out.to_str().unwrap());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_cli(&refs);
    }
    let mut files_a = BTreeMap::new();
    let mut files_b = BTreeMap::new();
    collect_files(&out_a, &out_a, &mut files_a);
    collect_files(&out_b, &out_b, &mut files_b);
    let names: Vec<&String> = files_a.keys().collect();
    assert_eq!(names, files_b.keys().collect::<Vec<_>>(), "{label}: artifact sets differ");
    let mut compared = 0usize;
    for (name, bytes) in &files_a {
        if name == "run_meta.json" {
            continue;
        }
        assert_eq!(bytes, &files_b[name], "{label}: {name} differs between reruns");
        compared += 1;
    }
    assert!(compared > 1, "{label}: nothing to compare");
    compared
}

#[test]
fn c10_every_subcommand_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        json!({
            "toy": {
                "depth": 1, "d_model": 16, "heads": 2, "d_af": 8, "d_ff": 32,
                "frame_count": 5, "l_text": 8, "l_ref": 2, "l_face": 2,
                "diffusion_steps": 10, "stage1_steps": 4, "stage2_steps": 4,
                "warmup_steps": 2, "batch_size": 2
            },
            "corpus_size": 4
        })
        .to_string(),
    )
    .unwrap();
    let cfg = config.to_str().unwrap().to_string();

    let ndjson = format!("{}\n{}\nnot json\n", fixture_clip("good"), fixture_clip("also-good"));
    let input = dir.path().join("clips.ndjson");
    std::fs::write(&input, ndjson).unwrap();
    let input_s = input.to_str().unwrap().to_string();

    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for id in ["pair_a", "pair_b"] {
        let frames = 12usize;
        let rows: Vec<Vec<(f64, f64)>> = (0..frames)
            .map(|j| (0..4).map(|i| (10.0 * i as f64 + (j as f64 * 0.7).sin(), 120.0)).collect())
            .collect();
        let landmarks = json!({"fps": 24.0, "canvas": [256, 256], "frames": rows}).to_string();
        std::fs::write(corpus.join(format!("{id}.spk0.landmarks.json")), &landmarks).unwrap();
        std::fs::write(corpus.join(format!("{id}.spk1.landmarks.json")), &landmarks).unwrap();
        std::fs::write(
            corpus.join(format!("{id}.ann.json")),
            json!({"speakers": [
                {"id": 0, "speaking": [[0, 6]], "listening": [[6, 12]]},
                {"id": 1, "speaking": [[6, 12]], "listening": [[0, 6]]}
            ]})
            .to_string(),
        )
        .unwrap();
        std::fs::write(
            corpus.join(format!("{id}.sync.json")),
            json!({"sync_l1": 6.5, "sync_l4": 5.5}).to_string(),
        )
        .unwrap();
    }
    let corpus_s = corpus.to_str().unwrap().to_string();

    let mut total = 0usize;
    total += assert_identical_reruns("demo-forward", &dir, |out| {
        vec!["demo-forward".into(), "--seed".into(), "5".into(), "--out".into(), out.into()]
    });
    total += assert_identical_reruns("train-toy", &dir, |out| {
        vec![
            "train-toy".into(),
            "--config".into(),
            cfg.clone(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            out.into(),
        ]
    });
    total += assert_identical_reruns("curate", &dir, |out| {
        vec![
            "curate".into(),
            "--input".into(),
            input_s.clone(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            out.into(),
        ]
    });
    total += assert_identical_reruns("eval", &dir, |out| {
        vec![
            "eval".into(),
            "--corpus".into(),
            corpus_s.clone(),
            "--plot".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            out.into(),
        ]
    });
    println!("PASS determinism: all four subcommands byte-identical across same-seed reruns ({total} artifacts compared)");
}
