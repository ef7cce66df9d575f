use super::bitstream::{
    Bitstream, EntropyMode, FrameRecord, Header, FLAG_NO_BIPRED_NET, FLAG_NO_FLOW_REFINE, FLAG_NO_TEMPORAL_SKIP,
};
use super::models::{coder_prefix, predict_prefix, refine_prefix, Models};
use super::plan::{plan_gop, sequence_order, SequenceStep, GOP_SIZE};
use crate::entropy::CodeVolume;
use crate::error::{shape_err, Error, Result};
use crate::flow::{approximate_bipred_flows, refine_flows, ModelId, PyramidalLk};
use crate::frame::{Frame, Signal};
use crate::prediction::predict_frame;
use crate::residual::{progressive_decode, progressive_encode, reconstruct, CodeTensor, CODE_STRIDE};

/// Encoder settings. Everything the decoder needs is written to the header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeOptions {
    /// Progressive iterations `K` for bi-predicted frames.
    pub iterations: usize,
    /// Iterations for intra frames; `None` uses `iterations`.
    pub intra_iterations: Option<usize>,
    pub entropy: EntropyMode,
    pub flow_refine: bool,
    pub bipred_net: bool,
    pub temporal_skip: bool,
    pub flow_levels: usize,
    pub flow_iters: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        let lk = PyramidalLk::default();
        EncodeOptions {
            iterations: 10,
            intra_iterations: None,
            entropy: EntropyMode::Context,
            flow_refine: true,
            bipred_net: true,
            temporal_skip: true,
            flow_levels: lk.levels,
            flow_iters: lk.iters,
        }
    }
}

/// Per-frame accounting of an encode.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedFrame {
    pub frame: usize,
    pub model: Option<ModelId>,
    pub entropy: EntropyMode,
    pub payload_bytes: usize,
    pub raw_bytes: usize,
    pub codes: CodeTensor,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub bitstream: Vec<u8>,
    /// Encoder-side reconstructions in display order.
    pub reconstructions: Vec<Frame>,
    /// In coding order, including temporal padding frames.
    pub coded: Vec<CodedFrame>,
}

struct Engine<'m> {
    models: &'m Models,
    lk: PyramidalLk,
    flow_refine: bool,
    bipred_net: bool,
    width: usize,
    height: usize,
}

impl Engine<'_> {
    /// Zero for intra steps; otherwise flows re-derived from the decoded
    /// references drive the bi-prediction.
    fn prediction(&self, s: &SequenceStep, buffer: &[Option<Frame>]) -> Result<Frame> {
        let time_index = s.frame as i64;
        let (model, dist) = match (s.step.model, s.step.distances()) {
            (Some(m), Some(d)) => (m, d),
            _ => return Ok(Frame::filled(self.width, self.height, self.models.channels(), 0.0, time_index)),
        };
        let (past, future) = self.references(s, buffer)?;
        let store = self.models.store();
        let f_fwd = self.lk.estimate(past, future)?;
        let f_bwd = self.lk.estimate(future, past)?;
        let approx = approximate_bipred_flows(&f_fwd, &f_bwd, dist)?;
        let flows = if self.flow_refine { refine_flows(store, &refine_prefix(model), &approx, past, future)? } else { approx };
        predict_frame(store, &predict_prefix(model), past, future, &flows, self.bipred_net, time_index)
    }

    fn reconstruct(&self, model: Option<ModelId>, prediction: &Frame, codes: &CodeTensor) -> Result<Frame> {
        let outputs = progressive_decode(self.models.store(), &coder_prefix(model), codes, self.width, self.height)?;
        reconstruct(prediction, &outputs)
    }

    fn bottleneck(&self, model: Option<ModelId>) -> Result<usize> {
        let name = format!("{}bin.w", coder_prefix(model));
        let w = self.models.store().get(&name).ok_or(Error::MissingParam(name))?;
        Ok(w.shape()[0])
    }

    fn references<'b>(&self, s: &SequenceStep, buffer: &'b [Option<Frame>]) -> Result<(&'b Frame, &'b Frame)> {
        let base = s.gop * GOP_SIZE;
        let get = |offset: Option<usize>| {
            offset
                .and_then(|o| buffer[base + o - 1].as_ref())
                .ok_or_else(|| Error::InvalidArgument(format!("reference for frame {} is not decoded", s.frame)))
        };
        Ok((get(s.step.past_ref)?, get(s.step.future_ref)?))
    }
}

fn padded_dim(v: usize) -> usize {
    v.div_ceil(CODE_STRIDE) * CODE_STRIDE
}

/// Edge-replicates `f` to `width x height`.
fn pad_frame(f: &Frame, width: usize, height: usize) -> Result<Frame> {
    if f.width() == width && f.height() == height {
        return Ok(f.clone());
    }
    let mut data = Vec::with_capacity(width * height * f.channels());
    for c in 0..f.channels() {
        for y in 0..height {
            for x in 0..width {
                data.push(f.sample(c, y.min(f.height() - 1), x.min(f.width() - 1)));
            }
        }
    }
    Frame::new(width, height, f.channels(), data, f.time_index)
}

fn finish_frame(f: &Frame, width: usize, height: usize, time_index: i64) -> Result<Frame> {
    let mut out = f.crop(0, 0, width, height)?;
    out.time_index = time_index;
    out.decoded = true;
    Ok(out)
}

fn dims_u8(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).ok().filter(|&x| x > 0).ok_or_else(|| Error::InvalidArgument(format!("{what} must be in 1..=255, got {v}")))
}

/// Closed-loop encode: every prediction uses the encoder's own
/// reconstructions, exactly as the decoder will.
pub fn encode_video(frames: &[Frame], models: &Models, opts: &EncodeOptions) -> Result<EncodeOutput> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("no frames to encode".into()))?;
    if let Some(bad) = frames.iter().position(|f| !f.same_layout(first)) {
        return Err(shape_err!("frame {bad} differs in size or channels from frame 0"));
    }
    if first.channels() != models.channels() {
        return Err(shape_err!("frames have {} channels, models expect {}", first.channels(), models.channels()));
    }
    let k = opts.iterations;
    let k_intra = opts.intra_iterations.unwrap_or(k);
    let header_k = dims_u8(k, "iterations")?;
    let header_k_intra = dims_u8(k_intra, "intra iterations")?;
    let (width, height) = (first.width(), first.height());
    let engine = Engine {
        models,
        lk: PyramidalLk::new(opts.flow_levels, opts.flow_iters),
        flow_refine: opts.flow_refine,
        bipred_net: opts.bipred_net,
        width: padded_dim(width),
        height: padded_dim(height),
    };
    let plan = plan_gop(GOP_SIZE)?;
    let order = sequence_order(&plan, frames.len());
    let total = order.iter().map(|s| s.frame + 1).max().unwrap_or(0);
    let originals: Vec<Frame> = (0..total)
        .map(|i| pad_frame(&frames[i.min(frames.len() - 1)], engine.width, engine.height))
        .collect::<Result<_>>()?;
    let entropy_model = models.entropy_model(opts.temporal_skip);
    let mut buffer: Vec<Option<Frame>> = vec![None; total];
    let mut records = Vec::with_capacity(order.len());
    let mut coded = Vec::with_capacity(order.len());
    let mut neighbor: Option<(usize, CodeVolume)> = None;
    for s in &order {
        let model = s.step.model;
        let prediction = engine.prediction(s, &buffer)?;
        let iterations = if model.is_some() { k } else { k_intra };
        let r0 = Signal::difference(&originals[s.frame], &prediction)?;
        let codes = progressive_encode(models.store(), &coder_prefix(model), &r0, iterations)?.codes;
        let raw = codes.pack_raw();
        let raw_bytes = raw.len();
        let (mode, payload) = if model == Some(ModelId::M12) && opts.entropy == EntropyMode::Context {
            let vol = CodeVolume::from_code(&codes);
            let nb = neighbor.as_ref().filter(|(g, v)| *g == s.gop && v.shape() == vol.shape()).map(|(_, v)| v);
            let ctx = entropy_model.encode(&vol, nb)?;
            neighbor = Some((s.gop, vol));
            if ctx.len() < raw.len() {
                (EntropyMode::Context, ctx)
            } else {
                (EntropyMode::Raw, raw)
            }
        } else {
            (EntropyMode::Raw, raw)
        };
        buffer[s.frame] = Some(engine.reconstruct(model, &prediction, &codes)?);
        coded.push(CodedFrame { frame: s.frame, model, entropy: mode, payload_bytes: payload.len(), raw_bytes, codes });
        records.push(FrameRecord {
            frame_index: s.frame as u32,
            model,
            iterations: iterations as u8,
            entropy: mode,
            payload,
        });
    }
    let mut flags = 0;
    if !opts.flow_refine {
        flags |= FLAG_NO_FLOW_REFINE;
    }
    if !opts.bipred_net {
        flags |= FLAG_NO_BIPRED_NET;
    }
    if !opts.temporal_skip {
        flags |= FLAG_NO_TEMPORAL_SKIP;
    }
    let header = Header {
        width: width as u32,
        height: height as u32,
        channels: first.channels() as u8,
        frame_count: u32::try_from(frames.len()).map_err(|_| Error::InvalidArgument("too many frames".into()))?,
        gop_size: GOP_SIZE as u8,
        iterations: header_k,
        intra_iterations: header_k_intra,
        entropy: opts.entropy,
        flags,
        flow_levels: dims_u8(opts.flow_levels, "flow levels")?,
        flow_iters: dims_u8(opts.flow_iters, "flow iterations")?,
        arch_hash: models.arch_hash(),
        weight_digest: models.digest(),
        record_count: records.len() as u32,
    };
    let bitstream = Bitstream { header, records }.to_bytes();
    let reconstructions = (0..frames.len())
        .map(|i| finish_frame(buffer[i].as_ref().expect("every frame is coded"), width, height, i as i64))
        .collect::<Result<_>>()?;
    Ok(EncodeOutput { bitstream, reconstructions, coded })
}

/// Decodes a bitstream using only its bytes and the weights. The weight
/// digest is verified before any payload is parsed.
pub fn decode_video(bytes: &[u8], models: &Models) -> Result<Vec<Frame>> {
    let bs = Bitstream::from_bytes_checked(bytes, |h| {
        if h.weight_digest != models.digest() {
            return Err(Error::DigestMismatch);
        }
        if h.arch_hash != models.arch_hash() {
            return Err(Error::Format("model architecture hash does not match the bitstream".into()));
        }
        if h.channels as usize != models.channels() {
            return Err(shape_err!("bitstream has {} channels, models expect {}", h.channels, models.channels()));
        }
        if h.gop_size as usize != GOP_SIZE {
            return Err(Error::Format(format!("unsupported GOP size {}", h.gop_size)));
        }
        Ok(())
    })?;
    let h = &bs.header;
    let (width, height) = (h.width as usize, h.height as usize);
    let engine = Engine {
        models,
        lk: PyramidalLk::new(h.flow_levels as usize, h.flow_iters as usize),
        flow_refine: !h.has_flag(FLAG_NO_FLOW_REFINE),
        bipred_net: !h.has_flag(FLAG_NO_BIPRED_NET),
        width: padded_dim(width),
        height: padded_dim(height),
    };
    let entropy_model = models.entropy_model(!h.has_flag(FLAG_NO_TEMPORAL_SKIP));
    let plan = plan_gop(GOP_SIZE)?;
    let order = sequence_order(&plan, h.frame_count as usize);
    if order.len() != bs.records.len() {
        return Err(Error::Format(format!("{} frame records, the coding plan needs {}", bs.records.len(), order.len())));
    }
    let total = order.iter().map(|s| s.frame + 1).max().unwrap_or(0);
    let (ch, cw) = (engine.height / CODE_STRIDE, engine.width / CODE_STRIDE);
    let mut buffer: Vec<Option<Frame>> = vec![None; total];
    let mut neighbor: Option<(usize, CodeVolume)> = None;
    for (s, rec) in order.iter().zip(&bs.records) {
        let model = s.step.model;
        if rec.frame_index as usize != s.frame || rec.model != model {
            return Err(Error::Format(format!("record for frame {} is out of coding order", rec.frame_index)));
        }
        let k = rec.iterations as usize;
        if k == 0 {
            return Err(Error::Format(format!("frame {} has zero iterations", s.frame)));
        }
        let cb = engine.bottleneck(model)?;
        let codes = match rec.entropy {
            EntropyMode::Raw => CodeTensor::unpack_raw(&rec.payload, k, cb, ch, cw)?,
            EntropyMode::Context => {
                if model != Some(ModelId::M12) {
                    return Err(Error::Format(format!("frame {} uses context coding outside M1,2", s.frame)));
                }
                let shape = [k * cb, ch, cw];
                let nb = neighbor.as_ref().filter(|(g, v)| *g == s.gop && v.shape() == shape).map(|(_, v)| v);
                entropy_model.decode(&rec.payload, shape, nb)?.into_code(k)?
            }
        };
        if model == Some(ModelId::M12) && h.entropy == EntropyMode::Context {
            neighbor = Some((s.gop, CodeVolume::from_code(&codes)));
        }
        let prediction = engine.prediction(s, &buffer)?;
        buffer[s.frame] = Some(engine.reconstruct(model, &prediction, &codes)?);
    }
    (0..h.frame_count as usize)
        .map(|i| finish_frame(buffer[i].as_ref().expect("every frame is coded"), width, height, i as i64))
        .collect()
}
