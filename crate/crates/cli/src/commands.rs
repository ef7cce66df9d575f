use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bpdvc::codec::{
    decode_video, encode_video, init_models, synthetic_corpus, train_all, EncodeOptions, EntropyMode, LossWeights,
    ModelConfig, Models, TrainSchedule, TrainSet, GOP_SIZE,
};
use bpdvc::evalsuite::{emit_rd, evaluate, gen_synthetic_clip, read_video, write_video, ClipSpec, MotionKind, RdPoint, Video};
use bpdvc::flow::PyramidalLk;
use bpdvc::frame::Frame;
use bpdvc::numerics::ParamStore;

use crate::config::ConfigFile;
use crate::{Cli, CodecFlags, Command, DecodeArgs, EncodeArgs, EvalArgs, Failure, RdArgs, RdCodecFlags, SynthArgs, TrainArgs};

/// Entropy-model training uses at most this many sequences.
const ENTROPY_SEQUENCES: usize = 16;
const DEFAULT_FPS: (u32, u32) = (25, 1);

pub fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    let seed = cfg.seed(cli.seed)?;
    match cli.command {
        Command::Train(a) => train(&cfg, seed, a),
        Command::Encode(a) => encode(&cfg, a),
        Command::Decode(a) => decode(&cfg, a),
        Command::Eval(a) => eval(a),
        Command::Rd(a) => rd(&cfg, a),
        Command::Synth(a) => synth(seed, a),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// A scratch directory next to `dest`, removed when dropped.
fn scratch_for(dest: &Path) -> Result<(tempfile::TempDir, PathBuf), Failure> {
    let parent = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = dest.file_name().ok_or_else(|| usage(format!("{} is not a file path", dest.display())))?;
    let scratch = tempfile::Builder::new()
        .prefix(".bpdvc-")
        .tempdir_in(&parent)
        .with_context(|| format!("cannot write into {}", parent.display()))?;
    let tmp = scratch.path().join(name);
    Ok((scratch, tmp))
}

fn move_into_place(tmp: &Path, dest: &Path) -> Result<(), Failure> {
    if dest.is_dir() {
        fs::remove_dir_all(dest)?;
    }
    fs::rename(tmp, dest).with_context(|| format!("cannot create {}", dest.display()))?;
    Ok(())
}

/// Runs `write` against a scratch path next to `dest`, then renames the
/// result over `dest`. Nothing is left behind on failure.
fn write_atomic<T>(dest: &Path, write: impl FnOnce(&Path) -> Result<T, Failure>) -> Result<T, Failure> {
    let (_scratch, tmp) = scratch_for(dest)?;
    let out = write(&tmp)?;
    move_into_place(&tmp, dest)?;
    Ok(out)
}

fn save_store(store: &ParamStore, dest: &Path) -> Result<(), Failure> {
    write_atomic(dest, |tmp| {
        let mut w = BufWriter::new(fs::File::create(tmp)?);
        store.save(&mut w)?;
        w.flush()?;
        Ok(())
    })
}

fn load_models(cfg: &ConfigFile, flag: Option<PathBuf>) -> Result<Models, Failure> {
    let path: PathBuf = cfg.get("weights", flag)?.ok_or_else(|| usage("--weights is required"))?;
    Models::load(&path).with_context(|| format!("cannot load weights {}", path.display())).map_err(Failure::Runtime)
}

fn load_video(path: &Path) -> Result<Vec<Frame>, Failure> {
    let video = read_video(path).with_context(|| format!("cannot read {}", path.display()))?;
    if video.lossy_ingest {
        eprintln!("warning: {} has subsampled chroma; it was upsampled on read", path.display());
    }
    Ok(video.frames)
}

fn schedule(cfg: &ConfigFile, seed: u64, a: &TrainArgs) -> Result<TrainSchedule, Failure> {
    let base = if a.full_scale { TrainSchedule::full_scale() } else { TrainSchedule::default() };
    let milestones = match cfg.get("steps", a.steps.clone())? {
        None => base.milestones,
        Some(list) => <[usize; 3]>::try_from(list.0).map_err(|_| usage("--steps needs exactly three milestones"))?,
    };
    let weights = match cfg.get("loss_weights", a.loss_weights.clone())? {
        None => base.weights,
        Some(list) => match list.0[..] {
            [m_a, m_p, m_f] => LossWeights::new(m_a, m_p, m_f).map_err(|e| usage(e.to_string()))?,
            _ => return Err(usage("--loss-weights needs three values")),
        },
    };
    let sched = TrainSchedule {
        milestones,
        lr: cfg.get_or("lr", a.lr, base.lr)?,
        halve_every: cfg.get_or("halve_every", a.halve_every, base.halve_every)?,
        batch: cfg.get_or("batch", a.batch, base.batch)?,
        patch: cfg.get_or("patch", a.patch, base.patch)?,
        clip: cfg.get_or("clip", a.clip, base.clip)?,
        seed,
        iterations: cfg.get_or("train_iters", a.train_iters, base.iterations)?,
        entropy_steps: cfg.get_or("entropy_steps", a.entropy_steps, base.entropy_steps)?,
        entropy_batch: cfg.get_or("entropy_batch", a.entropy_batch, base.entropy_batch)?,
        weights,
    };
    sched.validate().map_err(|e| usage(e.to_string()))?;
    Ok(sched)
}

fn train(cfg: &ConfigFile, seed: u64, a: TrainArgs) -> Result<(), Failure> {
    let sched = schedule(cfg, seed, &a)?;
    let lk = PyramidalLk::default();
    let (set, sequences) = match a.synthetic.as_deref() {
        Some("default") => {
            let clips = cfg.get_or("clips", a.clips, 48)?;
            let size = cfg.get_or("size", a.size, 64)?;
            if clips == 0 || size < sched.patch {
                return Err(usage(format!("need at least one clip of at least {} pixels", sched.patch)));
            }
            let corpus = synthetic_corpus(clips, size, size, seed)?;
            let seqs = corpus.iter().take(ENTROPY_SEQUENCES).map(|c| c.frames.clone()).collect::<Vec<_>>();
            (TrainSet::from_clips(&corpus, &lk)?, seqs)
        }
        Some(other) => return Err(usage(format!("unknown synthetic preset `{other}` (expected `default`)"))),
        None => {
            let seqs = a.data.iter().map(|p| load_video(p)).collect::<Result<Vec<_>, _>>()?;
            if seqs.iter().all(|s| s.len() <= GOP_SIZE) {
                return Err(usage(format!("training videos need more than {GOP_SIZE} frames")));
            }
            let set = TrainSet::from_sequences(&seqs, &lk)?;
            (set, seqs.into_iter().take(ENTROPY_SEQUENCES).collect())
        }
    };
    let channels = sequences[0][0].channels();
    let mut store = init_models(&ModelConfig { channels, ..ModelConfig::default() }, seed)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    eprintln!("training {} steps (milestones {:?}), seed {seed}", sched.total_steps(), sched.milestones);
    let outcome = write_atomic(&log_path, |tmp| {
        let mut log = BufWriter::new(fs::File::create(tmp)?);
        let report = train_all(&mut store, &set, &sequences, &sched, &mut log);
        log.flush()?;
        Ok(report)
    });
    let report = match outcome? {
        Ok(r) => r,
        Err(e @ bpdvc::Error::NonFinite(_)) => return Err(diverged(&store, &a.out, e)),
        Err(e) => {
            let _ = fs::remove_file(&log_path);
            return Err(e.into());
        }
    };
    save_store(&store, &a.out)?;
    println!(
        "{}",
        serde_json::json!({
            "weights": a.out,
            "log": log_path,
            "steps": report.steps,
            "stage1_flow_loss": [report.stage1_flow_initial, report.stage1_flow_final],
            "seconds": report.seconds,
        })
    );
    Ok(())
}

/// Saves the last finite parameters next to `out` and reports the failure.
fn diverged(store: &ParamStore, out: &Path, e: impl Into<anyhow::Error>) -> Failure {
    let mut p = out.as_os_str().to_owned();
    p.push(".last-good");
    let last_good = PathBuf::from(p);
    match save_store(store, &last_good) {
        Ok(()) => Failure::Runtime(e.into().context(format!("training diverged; last finite weights saved to {}", last_good.display()))),
        Err(_) => Failure::Runtime(e.into().context("training diverged")),
    }
}

impl From<RdCodecFlags> for CodecFlags {
    fn from(f: RdCodecFlags) -> Self {
        CodecFlags {
            iters: None,
            intra_iters: f.intra_iters,
            entropy: f.entropy,
            no_flow_refine: f.no_flow_refine,
            no_bipred_net: f.no_bipred_net,
            no_temporal_skip: f.no_temporal_skip,
            gop_size: f.gop_size,
            flow_levels: f.flow_levels,
            flow_iters: f.flow_iters,
        }
    }
}

fn encode_options(cfg: &ConfigFile, f: &CodecFlags) -> Result<EncodeOptions, Failure> {
    let base = EncodeOptions::default();
    let gop = cfg.get_or("gop_size", f.gop_size, GOP_SIZE)?;
    if gop != GOP_SIZE {
        return Err(usage(format!("only a GOP size of {GOP_SIZE} is supported, got {gop}")));
    }
    let entropy = match cfg.get::<String>("entropy", f.entropy.clone())?.as_deref() {
        None | Some("context") => EntropyMode::Context,
        Some("raw") => EntropyMode::Raw,
        Some(other) => return Err(usage(format!("entropy mode must be raw or context, got `{other}`"))),
    };
    let opts = EncodeOptions {
        iterations: cfg.get_or("iters", f.iters, base.iterations)?,
        intra_iterations: cfg.get("intra_iters", f.intra_iters)?,
        entropy,
        flow_refine: !cfg.switch("no_flow_refine", f.no_flow_refine)?,
        bipred_net: !cfg.switch("no_bipred_net", f.no_bipred_net)?,
        temporal_skip: !cfg.switch("no_temporal_skip", f.no_temporal_skip)?,
        flow_levels: cfg.get_or("flow_levels", f.flow_levels, base.flow_levels)?,
        flow_iters: cfg.get_or("flow_iters", f.flow_iters, base.flow_iters)?,
    };
    for (what, k) in [("iterations", Some(opts.iterations)), ("intra iterations", opts.intra_iterations)] {
        if let Some(k) = k {
            if !(1..=255).contains(&k) {
                return Err(usage(format!("{what} must be in 1..=255, got {k}")));
            }
        }
    }
    if opts.flow_levels == 0 {
        return Err(usage("flow levels must be positive"));
    }
    Ok(opts)
}

fn encode(cfg: &ConfigFile, a: EncodeArgs) -> Result<(), Failure> {
    let opts = encode_options(cfg, &a.codec)?;
    let models = load_models(cfg, a.weights)?;
    let frames = load_video(&a.input)?;
    let out = encode_video(&frames, &models, &opts)?;
    write_atomic(&a.out, |tmp| Ok(fs::write(tmp, &out.bitstream)?))?;
    let first = &frames[0];
    println!(
        "{}",
        serde_json::json!({
            "bitstream": a.out,
            "frames": frames.len(),
            "bytes": out.bitstream.len(),
            "bpp": (out.bitstream.len() * 8) as f64 / (frames.len() * first.width() * first.height()) as f64,
        })
    );
    Ok(())
}

fn decode(cfg: &ConfigFile, a: DecodeArgs) -> Result<(), Failure> {
    let models = load_models(cfg, a.weights)?;
    let bytes = fs::read(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let frames = decode_video(&bytes, &models)?;
    let video = Video { frames, fps: DEFAULT_FPS, lossy_ingest: false };
    write_atomic(&a.out, |tmp| Ok(write_video(tmp, &video)?))?;
    println!("{}", serde_json::json!({ "video": a.out, "frames": video.frames.len() }));
    Ok(())
}

/// The CSV at `dest` and its JSON mirror, both moved into place together.
fn write_points(points: &[RdPoint], dest: &Path) -> Result<(), Failure> {
    let (_scratch, tmp) = scratch_for(dest)?;
    let tmp_json = emit_rd(points, &tmp)?;
    move_into_place(&tmp_json, &dest.with_extension("json"))?;
    move_into_place(&tmp, dest)
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let reference = load_video(&a.reference)?;
    let decoded = load_video(&a.decoded)?;
    let bytes = fs::metadata(&a.bitstream).with_context(|| format!("cannot read {}", a.bitstream.display()))?.len();
    let point = evaluate(&reference, &decoded, bytes as usize, &a.label)?;
    write_points(std::slice::from_ref(&point), &a.out)?;
    println!("{}", serde_json::to_string(&point).map_err(anyhow::Error::from)?);
    Ok(())
}

fn rd(cfg: &ConfigFile, a: RdArgs) -> Result<(), Failure> {
    let base = encode_options(cfg, &CodecFlags::from(a.codec.clone()))?;
    let mut sweep = a.sweep.0.clone();
    sweep.sort_unstable();
    sweep.dedup();
    if let Some(&k) = sweep.iter().find(|&&k| !(1..=255).contains(&k)) {
        return Err(usage(format!("iterations must be in 1..=255, got {k}")));
    }
    let models = load_models(cfg, a.weights)?;
    let frames = load_video(&a.input)?;
    let mut points = Vec::with_capacity(sweep.len());
    for k in sweep {
        let out = encode_video(&frames, &models, &EncodeOptions { iterations: k, ..base })?;
        let decoded = decode_video(&out.bitstream, &models)?;
        if decoded.iter().zip(&out.reconstructions).any(|(d, r)| d.data() != r.data()) {
            return Err(Failure::Runtime(anyhow!("decoder output differs from the encoder's reconstruction at K={k}")));
        }
        let p = evaluate(&frames, &decoded, out.bitstream.len(), &format!("K={k}"))?;
        eprintln!("K={k}: {:.4} bpp, {:.3} dB, MS-SSIM {:.4}", p.bpp, p.psnr_db, p.ms_ssim);
        points.push(p);
    }
    write_points(&points, &a.out)?;
    Ok(())
}

fn synth(seed: u64, a: SynthArgs) -> Result<(), Failure> {
    let kind = match a.motion.as_str() {
        "translation" => MotionKind::Translation,
        "affine" => MotionKind::Affine,
        _ => MotionKind::Accelerating,
    };
    if a.width < 16 || a.height < 16 {
        return Err(usage("synthetic clips need at least 16x16 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = gen_synthetic_clip(ClipSpec::random(kind, a.width, a.height, &mut rng), seed)?;
    let video = Video { frames: clip.frames, fps: DEFAULT_FPS, lossy_ingest: false };
    write_atomic(&a.out, |tmp| Ok(write_video(tmp, &video)?))?;
    Ok(())
}
