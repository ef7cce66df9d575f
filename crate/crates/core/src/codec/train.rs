use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::models::{coder_prefix, predict_prefix, refine_prefix, Models, ENTROPY_PLAIN_PREFIX, ENTROPY_SKIP_PREFIX, INTRA_PREFIX};
use super::pipeline::{encode_video, EncodeOptions};
use super::plan::{plan_gop, FrameType, GOP_SIZE};
use super::{total_loss_var, EntropyMode, LossWeights};
use crate::entropy::{entropy_loss_var, CodeVolume};
use crate::error::{Error, Result};
use crate::evalsuite::{gen_synthetic_clip, ClipSpec, MotionKind, SyntheticClip};
use crate::flow::{approximate_bipred_flows, flow_loss_var, refine_flows_var, FlowPair, ModelId, PyramidalLk};
use crate::frame::{FlowField, Frame};
use crate::numerics::{adam_update, clip_global_norm, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};
use crate::prediction::{bipredict_var, extract_context_var, prediction_loss_var, warp_inputs_var};
use crate::residual::{ae_loss_var, progressive_var, CODE_STRIDE};

/// Step counts and optimizer settings.
///
/// `milestones` are cumulative: stage 1 runs until `milestones[0]`, stage 2
/// until `milestones[1]` and stage 3 until `milestones[2]`. Each step
/// updates one bundle, cycling through the three bi-prediction bundles and
/// the intra bundle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    pub milestones: [usize; 3],
    pub lr: f64,
    pub halve_every: usize,
    pub batch: usize,
    pub patch: usize,
    pub clip: f64,
    pub seed: u64,
    /// Progressive iterations unrolled in stage 3.
    pub iterations: usize,
    /// Optimizer steps for each of the two entropy models.
    pub entropy_steps: usize,
    pub entropy_batch: usize,
    pub weights: LossWeights,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            milestones: [2_000, 5_000, 10_000],
            lr: 5e-4,
            halve_every: 2_000,
            batch: 4,
            patch: 32,
            clip: 0.5,
            seed: 0,
            iterations: 4,
            entropy_steps: 400,
            entropy_batch: 8,
            weights: LossWeights::default(),
        }
    }
}

impl TrainSchedule {
    pub fn full_scale() -> Self {
        TrainSchedule {
            milestones: [50_000, 250_000, 500_000],
            halve_every: 100_000,
            batch: 16,
            patch: 64,
            entropy_steps: 20_000,
            ..TrainSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        let [a, b, c] = self.milestones;
        if a == 0 || b < a || c < b {
            return bad("milestones must be positive and nondecreasing");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.clip.is_finite() && self.clip > 0.0) {
            return bad("learning rate and clip norm must be positive");
        }
        if self.halve_every == 0 || self.batch == 0 || self.iterations == 0 || self.entropy_batch == 0 {
            return bad("halving period, batch sizes and iterations must be positive");
        }
        if self.patch == 0 || !self.patch.is_multiple_of(CODE_STRIDE) {
            return bad("patch size must be a positive multiple of 16");
        }
        LossWeights::new(self.weights.m_a, self.weights.m_p, self.weights.m_f).map(|_| ())
    }

    pub fn total_steps(&self) -> usize {
        self.milestones[2]
    }

    /// Stage of 0-based `step`, or `None` past the last milestone.
    pub fn stage_at(&self, step: usize) -> Option<Stage> {
        let [a, b, c] = self.milestones;
        match step {
            s if s < a => Some(Stage::Flow),
            s if s < b => Some(Stage::Prediction),
            s if s < c => Some(Stage::Full),
            _ => None,
        }
    }

    /// Learning rate halved every `halve_every` global steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * 0.5f64.powi((step / self.halve_every).min(1000) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Flow loss on the refinement subnet.
    Flow,
    /// Prediction loss plus weighted flow loss.
    Prediction,
    /// The full weighted loss including the residual coder.
    Full,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Flow => 1,
            Stage::Prediction => 2,
            Stage::Full => 3,
        }
    }
}

/// A separately trained set of subnets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bundle {
    Intra,
    Bipred(ModelId),
}

impl Bundle {
    pub fn prefix(self) -> String {
        match self {
            Bundle::Intra => INTRA_PREFIX.to_string(),
            Bundle::Bipred(m) => super::models::bundle_prefix(m),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Bundle::Intra => "intra",
            Bundle::Bipred(m) => m.tag(),
        }
    }

    /// Bundle trained at global `step`.
    pub fn for_step(step: usize) -> Bundle {
        match step % 4 {
            3 => Bundle::Intra,
            i => Bundle::Bipred(ModelId::ALL[i]),
        }
    }
}

/// One training tuple for a bi-prediction model. `approx` comes from
/// anchor flows estimated between the two references, `truth` holds the
/// current-to-reference flows.
#[derive(Clone, Debug)]
pub struct BipredSample {
    pub current: Frame,
    pub past: Frame,
    pub future: Frame,
    pub approx: FlowPair,
    pub truth: FlowPair,
}

/// Training tuples grouped by model.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    bipred: [Vec<BipredSample>; 3],
    intra: Vec<Frame>,
}

fn model_index(m: ModelId) -> usize {
    ModelId::ALL.iter().position(|&x| x == m).expect("known model")
}

impl TrainSet {
    /// Tuples from synthetic clips with analytic ground-truth flow.
    pub fn from_clips(clips: &[SyntheticClip], lk: &PyramidalLk) -> Result<Self> {
        let mut set = TrainSet::default();
        for clip in clips {
            set.add_gops(&clip.frames, lk, |a, b| Ok(clip.flow(a, b)))?;
        }
        Ok(set)
    }

    /// Tuples from plain frame sequences; the ground truth is the estimator
    /// run from the current frame to each reference.
    pub fn from_sequences(seqs: &[Vec<Frame>], lk: &PyramidalLk) -> Result<Self> {
        let mut set = TrainSet::default();
        for frames in seqs {
            set.add_gops(frames, lk, |a, b| lk.estimate(&frames[a], &frames[b]))?;
        }
        Ok(set)
    }

    fn add_gops(&mut self, frames: &[Frame], lk: &PyramidalLk, truth: impl Fn(usize, usize) -> Result<FlowField>) -> Result<()> {
        let plan = plan_gop(GOP_SIZE)?;
        if frames.len() > GOP_SIZE {
            self.intra.extend(frames.iter().cloned());
        }
        let mut base = 0;
        while base + GOP_SIZE < frames.len() {
            for s in &plan.steps {
                let n = base + s.offset - 1;
                if s.frame_type == FrameType::Intra {
                    continue;
                }
                let (model, dist) = (s.model.expect("bipred step"), s.distances().expect("bipred step"));
                let (p, f) = (base + s.past_ref.expect("bipred") - 1, base + s.future_ref.expect("bipred") - 1);
                let f_fwd = lk.estimate(&frames[p], &frames[f])?;
                let f_bwd = lk.estimate(&frames[f], &frames[p])?;
                self.bipred[model_index(model)].push(BipredSample {
                    current: frames[n].clone(),
                    past: frames[p].clone(),
                    future: frames[f].clone(),
                    approx: approximate_bipred_flows(&f_fwd, &f_bwd, dist)?,
                    truth: FlowPair::new(truth(n, p)?, truth(n, f)?)?,
                });
            }
            base += GOP_SIZE;
        }
        Ok(())
    }

    pub fn samples(&self, model: ModelId) -> &[BipredSample] {
        &self.bipred[model_index(model)]
    }

    pub fn intra_frames(&self) -> &[Frame] {
        &self.intra
    }

    fn check(&self, patch: usize) -> Result<()> {
        if self.intra.is_empty() || self.bipred.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("training data needs at least one 13-frame sequence".into()));
        }
        if let Some(f) = self.intra.iter().find(|f| f.width() < patch || f.height() < patch) {
            return Err(Error::InvalidArgument(format!("{}x{} frames are smaller than the {patch} pixel patch", f.width(), f.height())));
        }
        Ok(())
    }
}

/// Mixed-motion synthetic clips of 13 frames, half of them accelerating.
pub fn synthetic_corpus(count: usize, width: usize, height: usize, seed: u64) -> Result<Vec<SyntheticClip>> {
    const KINDS: [MotionKind; 4] = [MotionKind::Accelerating, MotionKind::Translation, MotionKind::Accelerating, MotionKind::Affine];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let spec = ClipSpec::random(KINDS[i % KINDS.len()], width, height, &mut rng);
            gen_synthetic_clip(spec, rng.gen())
        })
        .collect()
}

struct Batch {
    current: Tensor<f32>,
    past: Tensor<f32>,
    future: Tensor<f32>,
    approx: Tensor<f32>,
    truth: Tensor<f32>,
}

fn crop_origin(w: usize, h: usize, patch: usize, rng: &mut impl Rng) -> (usize, usize) {
    (rng.gen_range(0..=w - patch), rng.gen_range(0..=h - patch))
}

fn bipred_batch(samples: &[BipredSample], n: usize, patch: Option<usize>, rng: &mut impl Rng) -> Result<Batch> {
    let mut parts: [Vec<Tensor<f32>>; 5] = Default::default();
    for _ in 0..n {
        let s = &samples[rng.gen_range(0..samples.len())];
        let (w, h) = (s.current.width(), s.current.height());
        let (x0, y0, pw, ph) = match patch {
            Some(p) => {
                let (x, y) = crop_origin(w, h, p, rng);
                (x, y, p, p)
            }
            None => (0, 0, w, h),
        };
        parts[0].push(s.current.crop(x0, y0, pw, ph)?.to_tensor());
        parts[1].push(s.past.crop(x0, y0, pw, ph)?.to_tensor());
        parts[2].push(s.future.crop(x0, y0, pw, ph)?.to_tensor());
        parts[3].push(s.approx.crop(x0, y0, pw, ph)?.to_tensor());
        parts[4].push(s.truth.crop(x0, y0, pw, ph)?.to_tensor());
    }
    let [c, p, f, a, t] = parts;
    Ok(Batch {
        current: Tensor::stack_batch(&c)?,
        past: Tensor::stack_batch(&p)?,
        future: Tensor::stack_batch(&f)?,
        approx: Tensor::stack_batch(&a)?,
        truth: Tensor::stack_batch(&t)?,
    })
}

fn intra_batch(frames: &[Frame], n: usize, patch: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let f = &frames[rng.gen_range(0..frames.len())];
        let (x0, y0) = crop_origin(f.width(), f.height(), patch, rng);
        parts.push(f.crop(x0, y0, patch, patch)?.to_tensor());
    }
    Tensor::stack_batch(&parts)
}

/// Per-term losses of one step; absent terms were not part of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub total: f64,
    pub l_a: Option<f64>,
    pub l_p: Option<f64>,
    pub l_f: Option<f64>,
}

fn item(v: &Var<'_, f32>) -> f64 {
    v.value().data()[0] as f64
}

fn bipred_objective<'t>(
    p: &Bound<'t, f32>,
    model: ModelId,
    stage: Stage,
    b: &Batch,
    sched: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'t, f32>, StepLosses)> {
    let tape = p.tape();
    let c = |t: &Tensor<f32>| tape.constant(t.clone());
    let (past, future) = (c(&b.past), c(&b.future));
    let flows = refine_flows_var(p, &refine_prefix(model), c(&b.approx), past, future)?;
    let l_f = flow_loss_var(flows, c(&b.truth))?;
    let mut losses = StepLosses { l_f: Some(item(&l_f)), ..StepLosses::default() };
    if stage == Stage::Flow {
        losses.total = item(&l_f);
        return Ok((l_f, losses));
    }
    let pp = predict_prefix(model);
    let ctx_past = extract_context_var(p, &pp, past)?;
    let ctx_future = extract_context_var(p, &pp, future)?;
    let warped = warp_inputs_var(past, future, ctx_past, ctx_future, flows)?;
    let prediction = bipredict_var(p, &pp, warped, true)?;
    let current = c(&b.current);
    let l_p = prediction_loss_var(current, prediction)?;
    losses.l_p = Some(item(&l_p));
    let l_a = if stage == Stage::Full {
        let r0 = current.sub(prediction)?;
        let prog = progressive_var(p, &coder_prefix(Some(model)), r0, sched.iterations, Some(rng))?;
        let l_a = ae_loss_var(&prog.residues)?;
        losses.l_a = Some(item(&l_a));
        Some(l_a)
    } else {
        None
    };
    let total = total_loss_var(l_a, Some(l_p), Some(l_f), sched.weights)?;
    losses.total = item(&total);
    Ok((total, losses))
}

fn intra_objective<'t>(p: &Bound<'t, f32>, batch: &Tensor<f32>, sched: &TrainSchedule, rng: &mut ChaCha8Rng) -> Result<(Var<'t, f32>, StepLosses)> {
    let r0 = p.tape().constant(batch.clone());
    let prog = progressive_var(p, &coder_prefix(None), r0, sched.iterations, Some(rng))?;
    let l_a = ae_loss_var(&prog.residues)?;
    let total = total_loss_var(Some(l_a), None, None, sched.weights)?;
    let losses = StepLosses { total: item(&total), l_a: Some(item(&l_a)), ..StepLosses::default() };
    Ok((total, losses))
}

/// Subnets updated for `bundle` in `stage`.
fn trainable_prefixes(bundle: Bundle, stage: Stage) -> Vec<String> {
    match bundle {
        Bundle::Intra => vec![coder_prefix(None)],
        Bundle::Bipred(m) => {
            let mut v = vec![refine_prefix(m)];
            if stage != Stage::Flow {
                v.push(predict_prefix(m));
            }
            if stage == Stage::Full {
                v.push(coder_prefix(Some(m)));
            }
            v
        }
    }
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: usize,
    stage: u8,
    bundle: &'a str,
    lr: f64,
    grad_norm: f64,
    #[serde(flatten)]
    losses: StepLosses,
}

/// Outcome of [`train_codec`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean flow loss of the refinement subnets on a fixed full-frame
    /// validation batch, before and after stage 1.
    pub stage1_flow_initial: f64,
    pub stage1_flow_final: f64,
    pub seconds: f64,
}

/// Flow loss of every refinement subnet on a fixed batch, averaged over
/// models.
fn validation_flow_loss(subs: &[(Bundle, ParamStore)], batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for ((bundle, store), b) in subs.iter().zip(batches) {
        let Bundle::Bipred(m) = *bundle else { continue };
        let tape = Tape::<f32>::new();
        let p = store.bind(&tape, |_| false);
        let c = |t: &Tensor<f32>| tape.constant(t.clone());
        let flows = refine_flows_var(&p, &refine_prefix(m), c(&b.approx), c(&b.past), c(&b.future))?;
        total += item(&flow_loss_var(flows, c(&b.truth))?);
    }
    Ok(total / ModelId::ALL.len() as f64)
}

/// Three-stage training of every bundle in `store`. On divergence the
/// store keeps the last finite parameters and an error is returned.
pub fn train_codec(store: &mut ParamStore, set: &TrainSet, sched: &TrainSchedule, log: &mut dyn Write) -> Result<TrainReport> {
    sched.validate()?;
    set.check(sched.patch)?;
    let start = Instant::now();
    let mut bundles: Vec<Bundle> = ModelId::ALL.iter().map(|&m| Bundle::Bipred(m)).collect();
    bundles.push(Bundle::Intra);
    let mut subs: Vec<(Bundle, ParamStore)> = bundles
        .iter()
        .map(|&b| {
            let mut s = ParamStore::new();
            s.merge_prefix(store, &b.prefix());
            (b, s)
        })
        .collect();
    let mut val_rng = ChaCha8Rng::seed_from_u64(sched.seed ^ 0x5eed_0f_f10e);
    let val: Vec<Batch> = ModelId::ALL
        .iter()
        .map(|&m| bipred_batch(set.samples(m), sched.batch, None, &mut val_rng))
        .collect::<Result<_>>()?;
    let initial = validation_flow_loss(&subs, &val)?;
    let mut report = TrainReport { steps: 0, stage1_flow_initial: initial, stage1_flow_final: initial, seconds: 0.0 };
    let result = run_steps(&mut subs, set, sched, log, &val, &mut report);
    for (b, s) in &subs {
        store.merge_prefix(s, &b.prefix());
    }
    report.seconds = start.elapsed().as_secs_f64();
    result.map(|_| report)
}

fn run_steps(
    subs: &mut [(Bundle, ParamStore)],
    set: &TrainSet,
    sched: &TrainSchedule,
    log: &mut dyn Write,
    val: &[Batch],
    report: &mut TrainReport,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    for step in 0..sched.total_steps() {
        let stage = sched.stage_at(step).expect("step within schedule");
        let bundle = Bundle::for_step(step);
        let store = &mut subs.iter_mut().find(|(b, _)| *b == bundle).expect("bundle present").1;
        let prefixes = trainable_prefixes(bundle, stage);
        let tape = Tape::<f32>::new();
        let p = store.bind(&tape, |n| prefixes.iter().any(|pre| n.starts_with(pre.as_str())));
        let (loss, losses) = match bundle {
            Bundle::Bipred(m) => {
                let batch = bipred_batch(set.samples(m), sched.batch, Some(sched.patch), &mut rng)?;
                bipred_objective(&p, m, stage, &batch, sched, &mut rng)?
            }
            Bundle::Intra => {
                let batch = intra_batch(set.intra_frames(), sched.batch, sched.patch, &mut rng)?;
                intra_objective(&p, &batch, sched, &mut rng)?
            }
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} ({})", bundle.tag())));
        }
        let grads = tape.backward(loss);
        let mut gm = p.collect_grads(&grads);
        drop(p);
        let grad_norm = clip_global_norm(&mut gm, sched.clip);
        let lr = sched.lr_at(step);
        adam_update(store, &gm, &AdamConfig { lr, ..AdamConfig::default() })?;
        report.steps = step + 1;
        let rec = LogRecord { step: step + 1, stage: stage.number(), bundle: bundle.tag(), lr, grad_norm, losses };
        writeln!(log, "{}", serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?)?;
        if step + 1 == sched.milestones[0] {
            report.stage1_flow_final = validation_flow_loss(subs, val)?;
        }
    }
    Ok(())
}

/// One M1,2 code volume and the volume coded just before it in the same
/// GOP, if any.
#[derive(Clone, Debug)]
pub struct CodePair {
    pub current: CodeVolume,
    pub neighbor: Option<CodeVolume>,
}

/// Encodes `sequences` with `iterations` and collects the M1,2 code
/// volumes in coding order with their neighbors.
pub fn collect_code_pairs(models: &Models, sequences: &[Vec<Frame>], iterations: usize) -> Result<Vec<CodePair>> {
    let opts = EncodeOptions { iterations, entropy: EntropyMode::Raw, ..EncodeOptions::default() };
    let mut pairs = Vec::new();
    for frames in sequences {
        let out = encode_video(frames, models, &opts)?;
        let mut last: Option<(usize, CodeVolume)> = None;
        for c in out.coded.iter().filter(|c| c.model == Some(ModelId::M12)) {
            let gop = (c.frame - 1) / GOP_SIZE;
            let current = CodeVolume::from_code(&c.codes);
            let neighbor = last.take().filter(|(g, _)| *g == gop).map(|(_, v)| v);
            last = Some((gop, current.clone()));
            pairs.push(CodePair { current, neighbor });
        }
    }
    Ok(pairs)
}

/// Trains the temporal-skip and the plain context model on `pairs`.
pub fn train_entropy(store: &mut ParamStore, pairs: &[CodePair], sched: &TrainSchedule, log: &mut dyn Write) -> Result<()> {
    sched.validate()?;
    let shape = pairs.first().map(|p| p.current.shape()).ok_or_else(|| Error::InvalidArgument("no code volumes to train on".into()))?;
    if pairs.iter().any(|p| p.current.shape() != shape || p.neighbor.as_ref().is_some_and(|n| n.shape() != shape)) {
        return Err(Error::InvalidArgument("code volumes differ in shape".into()));
    }
    let zeros = Tensor::<f32>::zeros(&[1, 1, shape[0], shape[1], shape[2]]);
    for (prefix, skip) in [(ENTROPY_SKIP_PREFIX, true), (ENTROPY_PLAIN_PREFIX, false)] {
        let mut sub = ParamStore::new();
        sub.merge_prefix(store, prefix);
        // Same batches for both models.
        let mut rng = ChaCha8Rng::seed_from_u64(sched.seed ^ 0xe5);
        for step in 0..sched.entropy_steps {
            let picks: Vec<&CodePair> = (0..sched.entropy_batch).map(|_| &pairs[rng.gen_range(0..pairs.len())]).collect();
            let current = Tensor::stack_batch(&picks.iter().map(|p| p.current.to_tensor()).collect::<Vec<_>>())?;
            let neighbor = if skip {
                Some(Tensor::stack_batch(&picks.iter().map(|p| p.neighbor.as_ref().map_or_else(|| zeros.clone(), CodeVolume::to_tensor)).collect::<Vec<_>>())?)
            } else {
                None
            };
            let tape = Tape::<f32>::new();
            let p = sub.bind(&tape, |_| true);
            let loss = entropy_loss_var(&p, prefix, &current, neighbor.as_ref())?;
            let value = item(&loss);
            if !value.is_finite() {
                store.merge_prefix(&sub, prefix);
                return Err(Error::NonFinite(format!("entropy loss at step {step}")));
            }
            let grads = tape.backward(loss);
            let mut gm = p.collect_grads(&grads);
            drop(p);
            let grad_norm = clip_global_norm(&mut gm, sched.clip);
            let lr = sched.lr * 0.5f64.powi((2 * step / sched.entropy_steps.max(1)) as i32);
            adam_update(&mut sub, &gm, &AdamConfig { lr, ..AdamConfig::default() })?;
            let rec = serde_json::json!({
                "step": step + 1, "stage": "entropy", "bundle": prefix.trim_end_matches('.'),
                "lr": lr, "grad_norm": grad_norm, "total": value,
            });
            writeln!(log, "{rec}")?;
        }
        store.merge_prefix(&sub, prefix);
    }
    Ok(())
}

/// Codec training followed by entropy-model training on the codes of
/// `sequences` produced by the trained codec.
pub fn train_all(
    store: &mut ParamStore,
    set: &TrainSet,
    sequences: &[Vec<Frame>],
    sched: &TrainSchedule,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    let report = train_codec(store, set, sched, log)?;
    if sched.entropy_steps > 0 {
        let models = Models::new(store.clone())?;
        let pairs = collect_code_pairs(&models, sequences, sched.iterations)?;
        train_entropy(store, &pairs, sched, log)?;
    }
    Ok(report)
}
