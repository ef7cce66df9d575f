//! Bi-directional prediction from two warped references and their warped
//! context features.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::flow::FlowPair;
use crate::frame::Frame;
use crate::numerics::{conv, init_conv, init_conv_zero, Bound, ParamStore, Scalar, Tape, Tensor, Var};

const SLOPE: f64 = 0.1;

/// Context extractor and U-Net widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictConfig {
    pub ctx_channels: usize,
    pub widths: [usize; 3],
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { ctx_channels: 16, widths: [16, 32, 64] }
    }
}

/// Feature map aligned with the frame it was extracted from.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextMap {
    pub features: Tensor<f32>,
}

impl ContextMap {
    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }
}

/// The four warped inputs of the bi-prediction network, each `[1,*,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub past: Tensor<f32>,
    pub future: Tensor<f32>,
    pub ctx_past: Tensor<f32>,
    pub ctx_future: Tensor<f32>,
}

/// Adds `{prefix}ctx` and the `{prefix}unet.*` layers. The U-Net head
/// starts at zero, so a fresh network predicts the mean of the warped frames.
pub fn init_prediction(store: &mut ParamStore, prefix: &str, cfg: PredictConfig, channels: usize, rng: &mut impl Rng) {
    let [c0, c1, c2] = cfg.widths;
    let n = |s: &str| format!("{prefix}{s}");
    init_conv(store, &n("ctx"), cfg.ctx_channels, channels, 3, rng);
    init_conv(store, &n("unet.enc0"), c0, 2 * channels + 2 * cfg.ctx_channels, 3, rng);
    init_conv(store, &n("unet.enc1"), c1, c0, 3, rng);
    init_conv(store, &n("unet.enc2"), c2, c1, 3, rng);
    init_conv(store, &n("unet.mid"), c2, c2, 3, rng);
    init_conv(store, &n("unet.dec2"), c2, 2 * c2, 3, rng);
    init_conv(store, &n("unet.dec1"), c1, c2 + c1, 3, rng);
    init_conv(store, &n("unet.dec0"), c0, c1 + c0, 3, rng);
    init_conv_zero(store, &n("unet.head"), channels, c0, 3);
}

/// One 3x3 convolution followed by a rectifier.
pub fn extract_context_var<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, frame: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(conv(p, &format!("{prefix}ctx"), frame)?.relu())
}

pub fn extract_context(store: &ParamStore, prefix: &str, frame: &Frame) -> Result<ContextMap> {
    let tape = Tape::<f32>::new();
    let p = store.bind(&tape, |_| false);
    let out = extract_context_var(&p, prefix, tape.constant(frame.to_tensor()))?;
    Ok(ContextMap { features: (*out.value()).clone() })
}

/// Tape form of [`warp_inputs`]; `flows` is `[N,4,H,W]`.
pub fn warp_inputs_var<'t, T: Scalar>(
    past: Var<'t, T>,
    future: Var<'t, T>,
    ctx_past: Var<'t, T>,
    ctx_future: Var<'t, T>,
    flows: Var<'t, T>,
) -> Result<[Var<'t, T>; 4]> {
    let to_past = flows.slice_channels(0, 2)?;
    let to_future = flows.slice_channels(2, 2)?;
    Ok([past.warp(to_past)?, future.warp(to_future)?, ctx_past.warp(to_past)?, ctx_future.warp(to_future)?])
}

/// Backward-warps each reference and its context toward the current frame.
pub fn warp_inputs(
    past_ref: &Frame,
    future_ref: &Frame,
    ctx_past: &ContextMap,
    ctx_future: &ContextMap,
    flows: &FlowPair,
) -> Result<Warped> {
    if !past_ref.same_layout(future_ref) || past_ref.width() != flows.width() || past_ref.height() != flows.height() {
        return Err(shape_err!("warp inputs are not aligned"));
    }
    let tape = Tape::<f32>::new();
    let c = |t: Tensor<f32>| tape.constant(t);
    let [a, b, ca, cb] = warp_inputs_var(
        c(past_ref.to_tensor()),
        c(future_ref.to_tensor()),
        c(ctx_past.features.clone()),
        c(ctx_future.features.clone()),
        c(flows.to_tensor()),
    )?;
    let v = |x: Var<'_, f32>| (*x.value()).clone();
    Ok(Warped { past: v(a), future: v(b), ctx_past: v(ca), ctx_future: v(cb) })
}

/// `clamp(mean(past, future) + U-Net correction, 0, 1)`; with `use_net`
/// false the correction is skipped. `H` and `W` must be multiples of 8.
pub fn bipredict_var<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, warped: [Var<'t, T>; 4], use_net: bool) -> Result<Var<'t, T>> {
    let [past, future, ctx_past, ctx_future] = warped;
    let mean = past.add(future)?.scale(0.5);
    if !use_net {
        return Ok(mean.clamp(0.0, 1.0));
    }
    let s = past.shape();
    if s[2] % 8 != 0 || s[3] % 8 != 0 {
        return Err(shape_err!("bi-prediction needs H,W multiples of 8, got {}x{}", s[3], s[2]));
    }
    let n = |s: &str| format!("{prefix}unet.{s}");
    let x = Var::concat(&[past, future, ctx_past, ctx_future])?;
    let e0 = conv(p, &n("enc0"), x)?.leaky_relu(SLOPE);
    let e1 = conv(p, &n("enc1"), e0.avg_pool2()?)?.leaky_relu(SLOPE);
    let e2 = conv(p, &n("enc2"), e1.avg_pool2()?)?.leaky_relu(SLOPE);
    let m = conv(p, &n("mid"), e2.avg_pool2()?)?.leaky_relu(SLOPE);
    let d2 = conv(p, &n("dec2"), Var::concat(&[m.upsample2()?, e2])?)?.leaky_relu(SLOPE);
    let d1 = conv(p, &n("dec1"), Var::concat(&[d2.upsample2()?, e1])?)?.leaky_relu(SLOPE);
    let d0 = conv(p, &n("dec0"), Var::concat(&[d1.upsample2()?, e0])?)?.leaky_relu(SLOPE);
    let correction = conv(p, &n("head"), d0)?;
    Ok(mean.add(correction)?.clamp(0.0, 1.0))
}

pub fn bipredict(store: &ParamStore, prefix: &str, warped: &Warped, use_net: bool, time_index: i64) -> Result<Frame> {
    let tape = Tape::<f32>::new();
    let p = store.bind(&tape, |_| false);
    let c = |t: &Tensor<f32>| tape.constant(t.clone());
    let out = bipredict_var(&p, prefix, [c(&warped.past), c(&warped.future), c(&warped.ctx_past), c(&warped.ctx_future)], use_net)?;
    Frame::from_tensor(&out.value(), time_index)
}

/// Full prediction path from decoded references and derived flows. The
/// current source frame is deliberately not an input.
pub fn predict_frame(
    store: &ParamStore,
    prefix: &str,
    past_ref: &Frame,
    future_ref: &Frame,
    flows: &FlowPair,
    use_net: bool,
    time_index: i64,
) -> Result<Frame> {
    let (cp, cf) = if use_net {
        (extract_context(store, prefix, past_ref)?, extract_context(store, prefix, future_ref)?)
    } else {
        let empty = |f: &Frame| ContextMap { features: Tensor::zeros(&[1, 0, f.height(), f.width()]) };
        (empty(past_ref), empty(future_ref))
    };
    let warped = warp_inputs(past_ref, future_ref, &cp, &cf, flows)?;
    bipredict(store, prefix, &warped, use_net, time_index)
}

/// `1/N * sum_k sum_p |I - P|_1` with the per-pixel norm over channels.
pub fn prediction_loss(originals: &[Frame], predictions: &[Frame]) -> Result<f64> {
    if originals.is_empty() {
        return Err(Error::InvalidArgument("prediction loss needs a non-empty batch".into()));
    }
    if originals.len() != predictions.len() {
        return Err(shape_err!("prediction loss batch sizes {} and {} differ", originals.len(), predictions.len()));
    }
    let mut total = 0.0;
    for (i, p) in originals.iter().zip(predictions) {
        if !i.same_layout(p) {
            return Err(shape_err!("prediction loss operands differ in layout"));
        }
        total += i.data().iter().zip(p.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
    }
    Ok(total / originals.len() as f64)
}

/// Tape form of [`prediction_loss`] over `[N,C,H,W]` stacks.
pub fn prediction_loss_var<'t, T: Scalar>(original: Var<'t, T>, prediction: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = original.shape()[0];
    if n == 0 {
        return Err(Error::InvalidArgument("prediction loss needs a non-empty batch".into()));
    }
    Ok(original.sub(prediction)?.abs().sum().scale(1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::flow::{init_refine, refine_flows_var, RefineConfig};
    use crate::frame::FlowField;
    use crate::gradcheck::{gradcheck, random_tensor};

    fn wave(w: usize, h: usize, c: usize, shift: f64, t: i64) -> Frame {
        let mut d = Vec::new();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let xs = x as f64 - shift;
                    d.push((0.5 + 0.25 * (0.3 * xs + 0.2 * y as f64 + ch as f64).sin() + 0.15 * (0.17 * y as f64 - 0.4 * xs).cos()) as f32);
                }
            }
        }
        Frame::new(w, h, c, d, t).unwrap()
    }

    fn store(seed: u64, channels: usize) -> ParamStore {
        let mut s = ParamStore::new();
        let cfg = PredictConfig { ctx_channels: 3, widths: [4, 6, 8] };
        init_prediction(&mut s, "p.", cfg, channels, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn zero_weight_context_is_zero_and_deterministic() {
        let mut s = store(1, 3);
        s.zero_prefix("p.ctx");
        let f = wave(8, 8, 3, 0.0, 0);
        assert!(extract_context(&s, "p.", &f).unwrap().features.data().iter().all(|&v| v == 0.0));
        let s = store(1, 3);
        assert_eq!(extract_context(&s, "p.", &f).unwrap(), extract_context(&s, "p.", &f.clone()).unwrap());
        assert_eq!(extract_context(&s, "p.", &f).unwrap().channels(), 3);
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let s = store(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&[1, 3, 6, 6], 0.0, 1.0, &mut rng);
        let inputs: Vec<_> = s.iter().filter(|(n, _)| n.starts_with("p.ctx")).map(|(n, t)| (n.clone(), t.cast::<f64>())).collect();
        let report = gradcheck(&inputs, 30, 4, |p| {
            let y = extract_context_var(p, "p.", p.tape().constant(x.clone()))?;
            Ok(y.mul(y)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_flows_leave_inputs_unchanged() {
        let s = store(4, 3);
        let (a, b) = (wave(8, 8, 3, 0.0, 0), wave(8, 8, 3, 2.0, 2));
        let (ca, cb) = (extract_context(&s, "p.", &a).unwrap(), extract_context(&s, "p.", &b).unwrap());
        let zero = FlowPair::new(FlowField::zeros(8, 8), FlowField::zeros(8, 8)).unwrap();
        let w = warp_inputs(&a, &b, &ca, &cb, &zero).unwrap();
        assert_eq!(w.past, a.to_tensor());
        assert_eq!(w.future, b.to_tensor());
        assert_eq!(w.ctx_past, ca.features);
        assert_eq!(w.ctx_future, cb.features);
    }

    #[test]
    fn exact_translation_flows_align_references() {
        // Past shifted by -2, current at 0, future shifted by +3 (pixels).
        let (past, cur, fut) = (wave(32, 16, 1, -2.0, 0), wave(32, 16, 1, 0.0, 1), wave(32, 16, 1, 3.0, 2));
        let flows = FlowPair::new(FlowField::constant(32, 16, -2.0, 0.0), FlowField::constant(32, 16, 3.0, 0.0)).unwrap();
        let s = store(5, 1);
        let (cp, cf) = (extract_context(&s, "p.", &past).unwrap(), extract_context(&s, "p.", &fut).unwrap());
        let w = warp_inputs(&past, &fut, &cp, &cf, &flows).unwrap();
        for y in 0..16 {
            for x in 4..28 {
                let i = y * 32 + x;
                assert!((w.past.data()[i] - cur.data()[i]).abs() < 1e-3);
                assert!((w.future.data()[i] - cur.data()[i]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn warping_is_channel_independent() {
        let s = store(6, 3);
        let (a, b) = (wave(8, 8, 3, 0.0, 0), wave(8, 8, 3, 1.0, 2));
        let flows = FlowPair::new(
            FlowField::from_fn(8, 8, |x, y| (0.3 * x as f32 - 1.0, 0.2 * y as f32)),
            FlowField::from_fn(8, 8, |x, _| (-0.7, 0.1 * x as f32)),
        )
        .unwrap();
        let (ca, cb) = (extract_context(&s, "p.", &a).unwrap(), extract_context(&s, "p.", &b).unwrap());
        let joint = warp_inputs(&a, &b, &ca, &cb, &flows).unwrap();
        for c in 0..3 {
            let plane = |f: &Frame| Frame::new(8, 8, 1, f.data()[c * 64..(c + 1) * 64].to_vec(), 0).unwrap();
            let single = warp_inputs(&plane(&a), &plane(&b), &ca, &cb, &flows).unwrap();
            assert_eq!(&joint.past.data()[c * 64..(c + 1) * 64], single.past.data());
            assert_eq!(&joint.future.data()[c * 64..(c + 1) * 64], single.future.data());
        }
    }

    #[test]
    fn zero_head_predicts_clamped_mean() {
        let s = store(7, 3);
        let (a, b) = (wave(8, 8, 3, 0.0, 0), wave(8, 8, 3, 2.5, 2));
        let flows = FlowPair::new(FlowField::constant(8, 8, 0.5, 0.0), FlowField::constant(8, 8, -1.0, 0.5)).unwrap();
        let p = predict_frame(&s, "p.", &a, &b, &flows, true, 1).unwrap();
        let base = predict_frame(&s, "p.", &a, &b, &flows, false, 1).unwrap();
        assert_eq!(p, base);
        let zero = FlowPair::new(FlowField::zeros(8, 8), FlowField::zeros(8, 8)).unwrap();
        assert_eq!(predict_frame(&s, "p.", &a, &a, &zero, true, 1).unwrap().data(), a.data());
    }

    #[test]
    fn predictions_stay_in_unit_range() {
        let mut s = store(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for name in ["p.unet.head.w", "p.unet.head.b"] {
            let shape = s.get(name).unwrap().shape().to_vec();
            s.insert(name, random_tensor(&shape, -3.0, 3.0, &mut rng).cast());
        }
        let (a, b) = (wave(16, 16, 1, 0.0, 0), wave(16, 16, 1, 1.0, 2));
        let flows = FlowPair::new(FlowField::constant(16, 16, 0.3, 0.0), FlowField::constant(16, 16, -0.7, 0.0)).unwrap();
        let p = predict_frame(&s, "p.", &a, &b, &flows, true, 1).unwrap();
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.data().iter().any(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn prediction_loss_examples() {
        let i = Frame::new(2, 2, 1, vec![0.5, 0.75, 0.25, 1.0], 0).unwrap();
        let p = Frame::new(2, 2, 1, vec![0.0, 0.25, 0.75, 0.5], 0).unwrap();
        assert_eq!(prediction_loss(std::slice::from_ref(&i), std::slice::from_ref(&i)).unwrap(), 0.0);
        assert_eq!(prediction_loss(std::slice::from_ref(&i), &[p]).unwrap(), 2.0);
        assert!(prediction_loss(&[], &[]).is_err());
        let lo = Frame::new(2, 2, 1, vec![0.25, 0.5, 0.0, 0.5], 0).unwrap();
        let hi = Frame::new(2, 2, 1, vec![0.75, 1.0, 0.5, 1.0], 0).unwrap();
        let mid = Frame::new(2, 2, 1, vec![0.5, 0.75, 0.25, 0.75], 0).unwrap();
        assert_eq!(prediction_loss(std::slice::from_ref(&mid), &[lo]).unwrap(), prediction_loss(&[mid], &[hi]).unwrap());
    }

    #[test]
    fn prediction_loss_reaches_refinement_through_warping() {
        let mut rs = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        init_refine(&mut rs, "r.", RefineConfig { c0: 3, c1: 4 }, 1, &mut rng);
        init_conv(&mut rs, "r.head", 4, 3, 3, &mut rng);
        let ps = {
            let mut s = store(9, 1);
            init_conv(&mut s, "p.unet.head", 1, 4, 3, &mut rng);
            s
        };
        let past = random_tensor(&[1, 1, 8, 8], 0.1, 0.9, &mut rng);
        let fut = random_tensor(&[1, 1, 8, 8], 0.1, 0.9, &mut rng);
        let cur = random_tensor(&[1, 1, 8, 8], 0.1, 0.9, &mut rng);
        let approx = random_tensor(&[1, 4, 8, 8], -1.5, 1.5, &mut rng);
        let inputs: Vec<_> = rs.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).collect();
        let fixed = ps.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).collect::<Vec<_>>();
        let report = gradcheck(&inputs, 16, 13, |p| {
            let t = p.tape();
            let mut b = Bound::new(t);
            for (n, v) in p.iter() {
                b.insert(n, *v);
            }
            for (n, v) in &fixed {
                b.insert(n, t.constant(v.clone()));
            }
            let (pa, fu) = (t.constant(past.clone()), t.constant(fut.clone()));
            let flows = refine_flows_var(&b, "r.", t.constant(approx.clone()), pa, fu)?;
            let (ca, cf) = (extract_context_var(&b, "p.", pa)?, extract_context_var(&b, "p.", fu)?);
            let warped = warp_inputs_var(pa, fu, ca, cf, flows)?;
            let pred = bipredict_var(&b, "p.", warped, true)?;
            prediction_loss_var(t.constant(cur.clone()), pred)
        })
        .unwrap();
        assert!(report.inputs.iter().any(|c| c.analytic_norm > 0.0));
        assert!(report.max_rel_err() < 1e-3, "{report:?}");
    }
}
