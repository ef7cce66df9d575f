//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bpdvc::codec::{
    collect_code_pairs, decode_video, encode_video, init_models, plan_gop, predict_prefix, refine_prefix, synthetic_corpus,
    total_loss_var, train_all, EncodeOptions, EntropyMode, FrameType, LossWeights, ModelConfig, Models, TrainSchedule,
    TrainSet, GOP_SIZE,
};
use bpdvc::entropy::{init_entropy, ContextModel, CodeVolume, EntropyConfig};
use bpdvc::evalsuite::{gen_synthetic_clip, ms_ssim, psnr, sequence_psnr, ssim, ClipSpec, MotionKind, SyntheticClip};
use bpdvc::flow::{
    approximate_bipred_flows, endpoint_error, flow_loss_var, init_refine, refine_flows, refine_flows_var, ModelId,
    PyramidalLk, RefDistances, RefineConfig,
};
use bpdvc::frame::{FlowField, Frame, Signal};
use bpdvc::gradcheck::{gradcheck, gradcheck_with_step, random_tensor, GradCheckReport};
use bpdvc::numerics::{conv_lstm_cell, init_conv, ConvLstmShape, ParamStore, Tape, Tensor};
use bpdvc::prediction::{
    bipredict_var, extract_context_var, init_prediction, predict_frame, prediction_loss_var, warp_inputs_var, PredictConfig,
};
use bpdvc::residual::{
    ae_loss_var, binarize, binarize_var, init_coder, progressive_decode, progressive_encode, BinarizeMode, CoderConfig,
};

type Outcome = Result<String, String>;

/// Difference step for the U-Nets, whose outputs are small enough that a
/// finer step costs no accuracy and rarely crosses a rectifier kink.
const UNET_STEP: f64 = 1e-6;

struct Runner {
    failed: Vec<u32>,
}

impl Runner {
    fn run(&mut self, id: u32, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name}: {detail} ({secs:.1} s)");
                self.failed.push(id);
            }
        }
    }
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<T, E: std::fmt::Debug>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|err| format!("{err:?}"))
}

fn clip_of(kind: MotionKind, size: usize, seed: u64) -> SyntheticClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_synthetic_clip(ClipSpec::random(kind, size, size, &mut rng), seed).expect("valid clip")
}

/// (current, past, future, distances) display indices of every
/// bi-predicted step of one GOP.
fn bipred_positions() -> Vec<(usize, usize, usize, RefDistances)> {
    plan_gop(GOP_SIZE)
        .unwrap()
        .steps
        .iter()
        .filter(|s| s.frame_type == FrameType::Bipred)
        .map(|s| (s.offset - 1, s.past_ref.unwrap() - 1, s.future_ref.unwrap() - 1, s.distances().unwrap()))
        .collect()
}

fn crit1() -> Outcome {
    let margin = 8;
    let mut worst: f64 = 0.0;
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..5 {
        let clip = clip_of(MotionKind::Translation, 64, 100 + seed);
        for (n, p, f, dist) in bipred_positions() {
            let approx = e(approximate_bipred_flows(&clip.flow(p, f), &clip.flow(f, p), dist))?;
            let inner = 64 - 2 * margin;
            let crop = |x: &FlowField| x.crop(margin, margin, inner, inner).unwrap();
            for (a, t) in [(&approx.to_past, clip.flow(n, p)), (&approx.to_future, clip.flow(n, f))] {
                let epe = e(endpoint_error(&crop(a), &crop(&t)))?;
                worst = worst.max(epe);
                total += epe;
                count += 1;
            }
        }
    }
    let mean = total / count as f64;
    check(mean < 1e-3, format!("mean interior EPE {mean:.2e} px, worst field {worst:.2e} px over {count} fields (limit 1e-3)"))
}

fn crit2() -> Outcome {
    let cases = [
        ((3, 3), (4.0, 0.0), (-4.0, 0.0), (-2.0, 0.0), (2.0, 0.0)),
        ((1, 2), (9.0, 0.0), (-9.0, 0.0), (-3.0, 0.0), (6.0, 0.0)),
        ((6, 6), (6.0, 2.0), (-5.0, -1.0), (-2.75, -0.75), (2.75, 0.75)),
    ];
    let mut worst: f64 = 0.0;
    for ((n1, n2), fwd, bwd, past, future) in cases {
        let dist = e(RefDistances::new(n1, n2))?;
        let out = e(approximate_bipred_flows(&FlowField::constant(5, 4, fwd.0, fwd.1), &FlowField::constant(5, 4, bwd.0, bwd.1), dist))?;
        for (field, want) in [(&out.to_past, past), (&out.to_future, future)] {
            for y in 0..4 {
                for x in 0..5 {
                    let (dx, dy) = field.at(x, y);
                    worst = worst.max((dx as f64 - want.0).abs()).max((dy as f64 - want.1).abs());
                }
            }
        }
    }
    check(worst <= f32::EPSILON as f64, format!("3 worked examples, max deviation {worst:e}"))
}

fn params64(store: &ParamStore) -> Vec<(String, Tensor<f64>)> {
    store.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).collect()
}

/// Replaces every bias with small random values so rectifier kinks are not
/// sitting exactly on zero-valued border activations.
fn jitter_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
}

fn crit3() -> Outcome {
    const SEEDS: u64 = 20;
    let mut results: Vec<(&str, f64)> = Vec::new();
    fn record(results: &mut Vec<(&'static str, f64)>, name: &'static str, reports: Vec<GradCheckReport>) {
        results.push((name, reports.iter().map(GradCheckReport::max_rel_err).fold(0.0, f64::max)));
    }
    let run = |seed: u64, f: &dyn Fn(&mut ChaCha8Rng, u64) -> GradCheckReport| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut rng, seed)
    };

    record(&mut results, "conv2d", (0..SEEDS).map(|s| run(s, &|rng, seed| {
        let stride = 1 + (seed % 2) as usize;
        let inputs = vec![
            ("x".to_string(), random_tensor(&[2, 3, 5, 5], -1.0, 1.0, rng)),
            ("w".to_string(), random_tensor(&[4, 3, 3, 3], -0.5, 0.5, rng)),
            ("b".to_string(), random_tensor(&[4], -0.5, 0.5, rng)),
        ];
        let out = (5 + 2 - 3) / stride + 1;
        let proj = random_tensor(&[2, 4, out, out], -1.0, 1.0, rng);
        gradcheck(&inputs, 40, seed, |p| {
            let y = p.get("x")?.conv2d(p.get("w")?, Some(p.get("b")?), stride, 1)?;
            Ok(y.mul(p.tape().constant(proj.clone()))?.sum())
        }).unwrap()
    })).collect());

    record(&mut results, "convlstm cell", (0..SEEDS).map(|s| run(100 + s, &|rng, seed| {
        let mut store = ParamStore::new();
        ConvLstmShape { input: 2, hidden: 2, kernel_x: 3, kernel_h: 1 + 2 * (seed % 2) as usize }.init(&mut store, "cell", rng);
        jitter_biases(&mut store, rng);
        let mut inputs = params64(&store);
        inputs.push(("x".into(), random_tensor(&[1, 2, 4, 4], -1.0, 1.0, rng)));
        inputs.push(("h".into(), random_tensor(&[1, 2, 4, 4], -0.5, 0.5, rng)));
        inputs.push(("c".into(), random_tensor(&[1, 2, 4, 4], -0.5, 0.5, rng)));
        let proj = random_tensor(&[1, 2, 4, 4], -1.0, 1.0, rng);
        gradcheck(&inputs, 24, seed, |p| {
            let (h, c) = conv_lstm_cell(p, "cell", p.get("x")?, p.get("h")?, p.get("c")?)?;
            let (h2, c2) = conv_lstm_cell(p, "cell", p.get("x")?, h, c)?;
            h2.mul(p.tape().constant(proj.clone()))?.sum().add(c2.sum())
        }).unwrap()
    })).collect());

    record(&mut results, "warp (source and flow)", (0..SEEDS).map(|s| run(200 + s, &|rng, seed| {
        let inputs = vec![
            ("src".to_string(), random_tensor(&[1, 2, 5, 6], 0.0, 1.0, rng)),
            ("flow".to_string(), random_tensor(&[1, 2, 5, 6], -1.8, 1.8, rng)),
        ];
        let proj = random_tensor(&[1, 2, 5, 6], -1.0, 1.0, rng);
        gradcheck(&inputs, 60, seed, |p| {
            let y = p.get("src")?.warp(p.get("flow")?)?;
            Ok(y.mul(p.tape().constant(proj.clone()))?.sum())
        }).unwrap()
    })).collect());

    // Straight-through binarizer: the forward pass is the sign rule and the
    // backward pass is the identity, so the relaxed function is the oracle.
    let mut st_err: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = random_tensor(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let proj = random_tensor(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let xv = tape.param(x.clone());
        let b = binarize_var::<f64, ChaCha8Rng>(xv, BinarizeMode::Eval).unwrap();
        let sign = binarize::<f64, ChaCha8Rng>(&x, BinarizeMode::Eval).unwrap();
        if *b.value() != sign || sign.data().iter().zip(x.data()).any(|(&s, &v)| s != if v >= 0.0 { 1.0 } else { -1.0 }) {
            return Err("binarizer forward pass is not the sign rule".into());
        }
        let loss = b.mul(tape.constant(proj.clone())).unwrap().sum();
        let g = tape.backward(loss);
        let report = gradcheck(&[("x".to_string(), x.clone())], 48, seed, |p| Ok(p.get("x")?.mul(p.tape().constant(proj.clone()))?.sum())).unwrap();
        let analytic = g.wrt(xv).unwrap();
        let diff = analytic.data().iter().zip(proj.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        st_err = st_err.max(diff).max(report.max_rel_err());
    }
    results.push(("binarizer straight-through", st_err));

    record(&mut results, "refinement U-Net", (0..SEEDS).map(|s| run(400 + s, &|rng, seed| {
        let mut store = ParamStore::new();
        init_refine(&mut store, "r.", RefineConfig { c0: 3, c1: 4 }, 1, rng);
        init_conv(&mut store, "r.head", 4, 3, 3, rng);
        jitter_biases(&mut store, rng);
        let mut inputs = params64(&store);
        inputs.push(("approx".into(), random_tensor(&[1, 4, 8, 8], -1.5, 1.5, rng)));
        inputs.push(("past".into(), random_tensor(&[1, 1, 8, 8], 0.0, 1.0, rng)));
        inputs.push(("future".into(), random_tensor(&[1, 1, 8, 8], 0.0, 1.0, rng)));
        let proj = random_tensor(&[1, 4, 8, 8], -1.0, 1.0, rng);
        gradcheck_with_step(&inputs, 8, seed, UNET_STEP, |p| {
            let y = refine_flows_var(p, "r.", p.get("approx")?, p.get("past")?, p.get("future")?)?;
            Ok(y.mul(p.tape().constant(proj.clone()))?.sum())
        }).unwrap()
    })).collect());

    record(&mut results, "bi-prediction U-Net", (0..SEEDS).map(|s| run(500 + s, &|rng, seed| {
        let mut store = ParamStore::new();
        init_prediction(&mut store, "p.", PredictConfig { ctx_channels: 2, widths: [3, 3, 4] }, 1, rng);
        init_conv(&mut store, "p.unet.head", 1, 3, 3, rng);
        jitter_biases(&mut store, rng);
        // A small head keeps the output clamp inactive.
        for name in ["p.unet.head.w", "p.unet.head.b"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 0.05);
        }
        let mut inputs = params64(&store);
        inputs.push(("past".into(), random_tensor(&[1, 1, 8, 8], 0.2, 0.8, rng)));
        inputs.push(("future".into(), random_tensor(&[1, 1, 8, 8], 0.2, 0.8, rng)));
        inputs.push(("flows".into(), random_tensor(&[1, 4, 8, 8], -1.5, 1.5, rng)));
        let proj = random_tensor(&[1, 1, 8, 8], -1.0, 1.0, rng);
        gradcheck_with_step(&inputs, 6, seed, UNET_STEP, |p| {
            let (pa, fu) = (p.get("past")?, p.get("future")?);
            let (ca, cf) = (extract_context_var(p, "p.", pa)?, extract_context_var(p, "p.", fu)?);
            let warped = warp_inputs_var(pa, fu, ca, cf, p.get("flows")?)?;
            let y = bipredict_var(p, "p.", warped, true)?;
            Ok(y.mul(p.tape().constant(proj.clone()))?.sum())
        }).unwrap()
    })).collect());

    record(&mut results, "flow loss", (0..SEEDS).map(|s| run(600 + s, &|rng, seed| {
        let inputs = vec![
            ("pred".to_string(), random_tensor(&[2, 4, 3, 3], -2.0, 2.0, rng)),
            ("target".to_string(), random_tensor(&[2, 4, 3, 3], -2.0, 2.0, rng)),
        ];
        gradcheck(&inputs, 72, seed, |p| flow_loss_var(p.get("pred")?, p.get("target")?)).unwrap()
    })).collect());

    record(&mut results, "prediction loss", (0..SEEDS).map(|s| run(700 + s, &|rng, seed| {
        let inputs = vec![
            ("orig".to_string(), random_tensor(&[2, 3, 3, 3], 0.0, 1.0, rng)),
            ("pred".to_string(), random_tensor(&[2, 3, 3, 3], 0.0, 1.0, rng)),
        ];
        gradcheck(&inputs, 54, seed, |p| prediction_loss_var(p.get("orig")?, p.get("pred")?)).unwrap()
    })).collect());

    record(&mut results, "autoencoder loss", (0..SEEDS).map(|s| run(800 + s, &|rng, seed| {
        let inputs: Vec<(String, Tensor<f64>)> = (0..3).map(|k| (format!("r{k}"), random_tensor(&[2, 1, 3, 3], -1.0, 1.0, rng))).collect();
        gradcheck(&inputs, 18, seed, |p| ae_loss_var(&[p.get("r0")?, p.get("r1")?, p.get("r2")?])).unwrap()
    })).collect());

    record(&mut results, "total loss", (0..SEEDS).map(|s| run(900 + s, &|rng, seed| {
        let inputs = vec![
            ("a".to_string(), random_tensor(&[1], 0.0, 3.0, rng)),
            ("p".to_string(), random_tensor(&[1], 0.0, 3.0, rng)),
            ("f".to_string(), random_tensor(&[1], 0.0, 3.0, rng)),
        ];
        let w = LossWeights::new(rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(0.0..1.0)).unwrap();
        gradcheck(&inputs, 1, seed, |p| total_loss_var(Some(p.get("a")?), Some(p.get("p")?), Some(p.get("f")?), w)).unwrap()
    })).collect());

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(n, v)| format!("{n} {v:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst < 1e-4, format!("{SEEDS} seeds each, max rel err per op: {detail}"))
}

fn crit4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let mut store = ParamStore::new();
        let cfg = CoderConfig { enc_conv: 4, enc_hidden: [4, 8, 8], bottleneck: 4, dec_conv: 8, dec_hidden: [8, 8, 4, 4], kernel_x: 3, kernel_h: 1 };
        e(init_coder(&mut store, "c.", cfg, 1, &mut rng))?;
        jitter_biases(&mut store, &mut rng);
        let r0 = Signal::from_tensor(&random_tensor(&[1, 1, 16, 16], -0.5, 0.5, &mut rng).cast()).unwrap();
        let k = rng.gen_range(1..6);
        let prog = e(progressive_encode(&store, "c.", &r0, k))?;
        let mut r = r0.data.clone();
        for o in &prog.outputs {
            for (a, b) in r.iter_mut().zip(&o.data) {
                *a -= b;
            }
        }
        if r != prog.residues.last().unwrap().data {
            return Err(format!("trial {trial}: r0 - sum O differs from r^K"));
        }
        let decoded = e(progressive_decode(&store, "c.", &prog.codes, 16, 16))?;
        if decoded.iter().zip(&prog.outputs).any(|(a, b)| a.data != b.data) {
            return Err(format!("trial {trial}: decoder outputs differ from encoder outputs"));
        }
    }
    Ok("50 trials with random weights and K in 1..=5: bit-exact".into())
}

fn random_context_model(rng: &mut ChaCha8Rng, skip: bool) -> ContextModel {
    let mut store = ParamStore::new();
    init_entropy(&mut store, "e.", EntropyConfig { layers: 3, width: 8, kernel: 3, temporal_skip: skip }, rng).unwrap();
    jitter_biases(&mut store, rng);
    if skip {
        store.get_mut("e.skip.w").unwrap().data_mut()[0] = rng.gen_range(0.5..2.0);
    }
    ContextModel::from_store(&store, "e.").unwrap()
}

fn random_volume(shape: [usize; 3], p_plus: f64, rng: &mut ChaCha8Rng) -> CodeVolume {
    let bits = (0..shape.iter().product::<usize>()).map(|_| if rng.gen_bool(p_plus) { 1 } else { -1 }).collect();
    CodeVolume::new(shape[0], shape[1], shape[2], bits).unwrap()
}

fn crit5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_ratio: f64 = 0.0;
    for trial in 0..100 {
        let with_neighbor = trial % 2 == 0;
        let model = random_context_model(&mut rng, with_neighbor);
        let shape = [rng.gen_range(2..12), rng.gen_range(1..5), rng.gen_range(1..5)];
        let p_plus = rng.gen_range(0.05..0.95);
        let current = random_volume(shape, p_plus, &mut rng);
        let neighbor = with_neighbor.then(|| random_volume(shape, 0.5, &mut rng));
        let payload = e(model.encode(&current, neighbor.as_ref()))?;
        let decoded = e(model.decode(&payload, shape, neighbor.as_ref()))?;
        if decoded != current {
            return Err(format!("trial {trial}: decode(encode(v)) != v"));
        }
        let ce_bits = e(model.cross_entropy(&current, neighbor.as_ref()))? * current.len() as f64 / std::f64::consts::LN_2;
        let coded = payload.len() as f64 * 8.0;
        if coded > 1.01 * ce_bits + 32.0 {
            return Err(format!("trial {trial}: {coded} bits coded, cross-entropy {ce_bits:.1} bits"));
        }
        worst_ratio = worst_ratio.max((coded - 32.0) / ce_bits.max(1.0));
        let probs = e(model.predict_bit_probs(&current, neighbor.as_ref()))?;
        let i = rng.gen_range(0..current.len());
        let mut flipped = current.bits().to_vec();
        flipped[i] = -flipped[i];
        let altered = CodeVolume::new(shape[0], shape[1], shape[2], flipped).unwrap();
        let probs2 = e(model.predict_bit_probs(&altered, neighbor.as_ref()))?;
        if probs[..=i] != probs2[..=i] {
            return Err(format!("trial {trial}: flipping bit {i} changed an earlier or its own probability"));
        }
    }
    Ok(format!("100 volumes round-trip; (coded - 32 bits) / cross-entropy <= {worst_ratio:.4}; causality exact"))
}

fn crit6() -> Outcome {
    let models = e(Models::new(e(init_models(&ModelConfig::default(), 6))?))?;
    let kinds = [MotionKind::Translation, MotionKind::Accelerating, MotionKind::Affine];
    let mut bytes = Vec::new();
    for (i, kind) in kinds.into_iter().enumerate() {
        let clip = clip_of(kind, 64, 600 + i as u64);
        let out = e(encode_video(&clip.frames, &models, &EncodeOptions::default()))?;
        // The decoder sees only the stream and the weights.
        let stream = out.bitstream.clone();
        let decoded = e(decode_video(&stream, &models))?;
        if decoded.len() != 13 || decoded.iter().zip(&out.reconstructions).any(|(a, b)| a.data() != b.data()) {
            return Err(format!("clip {i}: decoder reconstructions differ from the encoder's"));
        }
        bytes.push(stream.len());
    }
    Ok(format!("3 clips of 13 frames at 64x64, K=10, context entropy: bit-identical (stream bytes {bytes:?})"))
}

fn crit7() -> Outcome {
    let models = e(Models::new(e(init_models(&ModelConfig::default(), 7))?))?;
    let clip = clip_of(MotionKind::Accelerating, 64, 700);
    let opts = EncodeOptions { iterations: 1, entropy: EntropyMode::Raw, ..EncodeOptions::default() };
    let out = e(encode_video(&clip.frames, &models, &opts))?;
    let bipred: Vec<_> = out.coded.iter().filter(|c| c.model.is_some()).collect();
    let bits: usize = bipred.iter().map(|c| c.payload_bytes * 8).sum();
    let bpp = bits as f64 / (bipred.len() * 64 * 64) as f64;
    let per_frame_exact = bipred.iter().all(|c| c.payload_bytes * 8 == 64 * 64 / 8);
    check(bpp == 0.125 && per_frame_exact, format!("{} bi-predicted frames, payload {bpp} bpp", bipred.len()))
}

/// Everything the training criteria need, produced once.
struct Trained {
    models: Models,
    report: bpdvc::codec::TrainReport,
    seconds: f64,
}

fn train_desk() -> Result<Trained, String> {
    let start = Instant::now();
    let clips = e(synthetic_corpus(48, 64, 64, 8))?;
    let set = e(TrainSet::from_clips(&clips, &PyramidalLk::default()))?;
    let seqs: Vec<Vec<Frame>> = clips.iter().take(16).map(|c| c.frames.clone()).collect();
    let mut store = e(init_models(&ModelConfig::default(), 8))?;
    let sched = TrainSchedule::default();
    let report = e(train_all(&mut store, &set, &seqs, &sched, &mut std::io::sink()))?;
    Ok(Trained { models: e(Models::new(store))?, report, seconds: start.elapsed().as_secs_f64() })
}

fn crit8a(t: &Trained) -> Outcome {
    let r = &t.report;
    let drop = 1.0 - r.stage1_flow_final / r.stage1_flow_initial;
    check(
        drop >= 0.30 && t.seconds < 7200.0,
        format!(
            "stage-1 l_f {:.3} -> {:.3} ({:.1}% lower, need >= 30%); {} steps, whole run {:.0} s (limit 7200 s)",
            r.stage1_flow_initial,
            r.stage1_flow_final,
            100.0 * drop,
            r.steps,
            t.seconds
        ),
    )
}

fn held_out(kind: Option<MotionKind>, count: usize, seed: u64) -> Vec<SyntheticClip> {
    match kind {
        Some(k) => (0..count).map(|i| clip_of(k, 64, seed + i as u64)).collect(),
        None => synthetic_corpus(count, 64, 64, seed).unwrap(),
    }
}

fn crit8b(t: &Trained) -> Outcome {
    let lk = PyramidalLk::default();
    let (mut raw, mut refined, mut n) = (0.0, 0.0, 0);
    for clip in held_out(Some(MotionKind::Accelerating), 6, 8_100) {
        let f = &clip.frames;
        for (cur, p, fu, dist) in bipred_positions() {
            let approx = e(approximate_bipred_flows(&e(lk.estimate(&f[p], &f[fu]))?, &e(lk.estimate(&f[fu], &f[p]))?, dist))?;
            let better = e(refine_flows(t.models.store(), &refine_prefix(dist.model()), &approx, &f[p], &f[fu]))?;
            for (a, b, truth) in [(&approx.to_past, &better.to_past, clip.flow(cur, p)), (&approx.to_future, &better.to_future, clip.flow(cur, fu))] {
                raw += e(endpoint_error(a, &truth))?;
                refined += e(endpoint_error(b, &truth))?;
                n += 1;
            }
        }
    }
    let (raw, refined) = (raw / n as f64, refined / n as f64);
    check(refined < raw, format!("held-out accelerating EPE: refined {refined:.4} px vs approximation {raw:.4} px"))
}

fn crit8c(t: &Trained) -> Outcome {
    let lk = PyramidalLk::default();
    let store = t.models.store();
    let (mut net, mut mean, mut n) = (0.0, 0.0, 0);
    for clip in held_out(None, 8, 8_200) {
        let f = &clip.frames;
        for (cur, p, fu, dist) in bipred_positions() {
            let m = dist.model();
            let approx = e(approximate_bipred_flows(&e(lk.estimate(&f[p], &f[fu]))?, &e(lk.estimate(&f[fu], &f[p]))?, dist))?;
            let flows = e(refine_flows(store, &refine_prefix(m), &approx, &f[p], &f[fu]))?;
            let with_net = e(predict_frame(store, &predict_prefix(m), &f[p], &f[fu], &flows, true, cur as i64))?;
            let without = e(predict_frame(store, &predict_prefix(m), &f[p], &f[fu], &flows, false, cur as i64))?;
            net += e(psnr(&f[cur], &with_net))?;
            mean += e(psnr(&f[cur], &without))?;
            n += 1;
        }
    }
    let (net, mean) = (net / n as f64, mean / n as f64);
    check(net > mean, format!("held-out prediction PSNR: network {net:.3} dB vs mean of warped {mean:.3} dB"))
}

fn crit8d(t: &Trained) -> Outcome {
    let (mut full_rec, mut ablated_rec, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut full_bytes, mut ablated_bytes) = (0, 0);
    for clip in held_out(None, 4, 8_300) {
        let base = EncodeOptions { iterations: 4, entropy: EntropyMode::Raw, ..EncodeOptions::default() };
        let full = e(encode_video(&clip.frames, &t.models, &base))?;
        let ablated = e(encode_video(&clip.frames, &t.models, &EncodeOptions { bipred_net: false, ..base }))?;
        full_bytes += full.bitstream.len();
        ablated_bytes += ablated.bitstream.len();
        full_rec.extend(e(decode_video(&full.bitstream, &t.models))?);
        ablated_rec.extend(e(decode_video(&ablated.bitstream, &t.models))?);
        refs.extend(clip.frames);
    }
    let a = e(sequence_psnr(&refs, &full_rec))?;
    let b = e(sequence_psnr(&refs, &ablated_rec))?;
    check(
        a > b && full_bytes == ablated_bytes,
        format!("K=4 raw rate ({full_bytes} bytes each): full {a:.3} dB vs no bi-prediction net {b:.3} dB"),
    )
}

fn crit9(t: &Trained) -> Outcome {
    let seqs: Vec<Vec<Frame>> = held_out(None, 4, 9_000).into_iter().map(|c| c.frames).collect();
    let pairs = e(collect_code_pairs(&t.models, &seqs, 4))?;
    let (skip, plain) = (t.models.entropy_model(true), t.models.entropy_model(false));
    let (mut raw, mut with_skip, mut without) = (0usize, 0usize, 0usize);
    for p in &pairs {
        raw += p.current.len().div_ceil(8);
        with_skip += e(skip.encode(&p.current, p.neighbor.as_ref()))?.len();
        without += e(plain.encode(&p.current, None))?.len();
    }
    let n = pairs.len() as f64;
    let (raw, with_skip, without) = (raw as f64 / n, with_skip as f64 / n, without as f64 / n);
    check(
        with_skip < raw && with_skip <= without,
        format!("{} M1,2 volumes, mean payload bytes: raw {raw:.1}, context+skip {with_skip:.1}, masked only {without:.1}", pairs.len()),
    )
}

/// Brute-force SSIM: every valid 11x11 window evaluated directly.
fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
    let r = 5i64;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    for c in 0..a.channels() {
        let mut acc = 0.0;
        let mut count = 0;
        for y in 0..=(h - 11) {
            for x in 0..=(w - 11) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = g[dy] * g[dx] / norm;
                        let va = a.sample(c, y + dy, x + dx) as f64;
                        let vb = b.sample(c, y + dy, x + dx) as f64;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / a.channels() as f64
}

fn crit10() -> Outcome {
    let a = Frame::filled(32, 32, 3, 0.5, 0);
    let b = Frame::new(32, 32, 3, vec![0.5 + 1.0 / 255.0; 32 * 32 * 3], 0).unwrap();
    let p = e(psnr(&a, &b))?;
    let clip = clip_of(MotionKind::Affine, 64, 1_000);
    let self_ms = e(ms_ssim(&clip.frames[0], &clip.frames[0]))?;
    let mut worst: f64 = 0.0;
    for (i, j) in [(0, 1), (0, 6), (3, 12)] {
        let fast = e(ssim(&clip.frames[i], &clip.frames[j]))?;
        worst = worst.max((fast - ssim_oracle(&clip.frames[i], &clip.frames[j])).abs());
    }
    check(
        (p - 48.13).abs() <= 0.01 && self_ms == 1.0 && worst < 1e-6,
        format!("PSNR(1/255) {p:.4} dB, MS-SSIM(a,a) {self_ms}, SSIM vs brute force max diff {worst:.1e}"),
    )
}

fn crit11() -> Outcome {
    let plan = e(plan_gop(12))?;
    e(plan.validate())?;
    let got: Vec<(usize, Option<ModelId>, Option<usize>, Option<usize>)> =
        plan.steps.iter().map(|s| (s.offset, s.model, s.past_ref, s.future_ref)).collect();
    let (m12, m33, m66) = (Some(ModelId::M12), Some(ModelId::M33), Some(ModelId::M66));
    let want = vec![
        (1, None, None, None),
        (13, None, None, None),
        (7, m66, Some(1), Some(13)),
        (4, m33, Some(1), Some(7)),
        (10, m33, Some(7), Some(13)),
        (2, m12, Some(1), Some(4)),
        (3, m12, Some(1), Some(4)),
        (5, m12, Some(4), Some(7)),
        (6, m12, Some(4), Some(7)),
        (8, m12, Some(7), Some(10)),
        (9, m12, Some(7), Some(10)),
        (11, m12, Some(10), Some(13)),
        (12, m12, Some(10), Some(13)),
    ];
    let mirror_ok = plan.steps[6].distances().is_some_and(|d| d.is_mirror() && d.model() == ModelId::M12);
    check(got == want && mirror_ok && plan_gop(8).is_err(), "13 steps match the hierarchy; DAG validates; other sizes rejected".into())
}

fn main() {
    let mut r = Runner { failed: Vec::new() };
    r.run(1, "flow-approximation exactness", crit1);
    r.run(2, "substitution identities", crit2);
    r.run(3, "gradient suite", crit3);
    r.run(4, "telescoping identity", crit4);
    r.run(5, "entropy round-trip", crit5);
    r.run(6, "closed-loop codec", crit6);
    r.run(7, "raw-rate identity", crit7);
    let start = Instant::now();
    match train_desk() {
        Ok(t) => {
            println!("desk-scale training finished in {:.0} s", start.elapsed().as_secs_f64());
            r.run(8, "(a) stage-1 flow loss reduction", || crit8a(&t));
            r.run(8, "(b) refinement beats approximation", || crit8b(&t));
            r.run(8, "(c) bi-prediction beats mean of warped", || crit8c(&t));
            r.run(8, "(d) full codec beats no bi-prediction net", || crit8d(&t));
            r.run(9, "entropy gain direction", || crit9(&t));
        }
        Err(err) => {
            r.run(8, "desk-scale training", || Err(err.clone()));
            r.run(9, "entropy gain direction", || Err("no trained model".into()));
        }
    }
    r.run(10, "metric sanity", crit10);
    r.run(11, "GOP plan", crit11);
    if r.failed.is_empty() {
        println!("acceptance: all criteria PASS");
    } else {
        println!("acceptance: FAIL for criteria {:?}", r.failed);
        std::process::exit(1);
    }
}
