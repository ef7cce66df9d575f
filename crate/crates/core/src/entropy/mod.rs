//! Masked 3-D convolutional bit model with a temporal skip from an
//! adjacent frame's code, driving the binary range coder.

mod coder;

pub use coder::{ac_decode_with_probs, ac_encode, BinaryDecoder, BinaryEncoder, PROB_BITS, PROB_ONE, TERMINATION_BYTES};

use std::rc::Rc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{he_uniform, sigmoid, Bound, ParamStore, Scalar, Tape, Tensor, Var};
use crate::residual::CodeTensor;

const SLOPE: f64 = 0.1;

/// Context-model shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntropyConfig {
    pub layers: usize,
    pub width: usize,
    pub kernel: usize,
    pub temporal_skip: bool,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig { layers: 4, width: 32, kernel: 3, temporal_skip: true }
    }
}

/// Code bits viewed as a `D x H x W` volume, scanned with `d` slowest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    bits: Vec<i8>,
}

impl CodeVolume {
    pub fn new(depth: usize, height: usize, width: usize, bits: Vec<i8>) -> Result<Self> {
        if bits.len() != depth * height * width {
            return Err(shape_err!("volume has {} bits, expected {depth}x{height}x{width}", bits.len()));
        }
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::InvalidArgument("volume values must be -1 or +1".into()));
        }
        Ok(CodeVolume { depth, height, width, bits })
    }

    /// Iteration-major stacking: depth index `k * C_b + c`.
    pub fn from_code(code: &CodeTensor) -> Self {
        CodeVolume { depth: code.iterations * code.channels, height: code.height, width: code.width, bits: code.bits().to_vec() }
    }

    pub fn into_code(self, iterations: usize) -> Result<CodeTensor> {
        if iterations == 0 || !self.depth.is_multiple_of(iterations) {
            return Err(shape_err!("depth {} does not split into {iterations} iterations", self.depth));
        }
        CodeTensor::new(iterations, self.depth / iterations, self.height, self.width, self.bits)
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    /// `[1,1,D,H,W]` tensor of the `+-1` values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[1, 1, self.depth, self.height, self.width], self.bits.iter().map(|&b| T::of(b as f64)).collect())
            .expect("volume layout")
    }
}

/// Kernel offsets strictly before the centre in `(d,h,w)` order, plus the
/// centre itself when `include_center`.
pub fn causal_taps(kernel: usize, include_center: bool) -> Vec<[isize; 3]> {
    let r = (kernel / 2) as isize;
    let mut taps = Vec::new();
    for dd in -r..=r {
        for dh in -r..=r {
            for dw in -r..=r {
                let off = [dd, dh, dw];
                if off < [0, 0, 0] || (include_center && off == [0, 0, 0]) {
                    taps.push(off);
                }
            }
        }
    }
    taps
}

/// Adds `{prefix}l{i}.w` (`[Cout,Cin,taps]`), `{prefix}l{i}.b` and, with
/// `temporal_skip`, the scalar skip `{prefix}skip.w`/`{prefix}skip.b`.
pub fn init_entropy(store: &mut ParamStore, prefix: &str, cfg: EntropyConfig, rng: &mut impl Rng) -> Result<()> {
    if cfg.layers < 2 || cfg.kernel.is_multiple_of(2) || cfg.width == 0 {
        return Err(Error::InvalidArgument("entropy model needs >= 2 layers, odd kernels and a positive width".into()));
    }
    for l in 0..cfg.layers {
        let taps = causal_taps(cfg.kernel, l > 0).len();
        let cin = if l == 0 { 1 } else { cfg.width };
        let cout = if l + 1 == cfg.layers { 1 } else { cfg.width };
        store.insert(&format!("{prefix}l{l}.w"), he_uniform(&[cout, cin, taps], cin * taps, rng));
        store.insert(&format!("{prefix}l{l}.b"), Tensor::zeros(&[cout]));
    }
    if cfg.temporal_skip {
        store.insert(&format!("{prefix}skip.w"), Tensor::zeros(&[1, 1, 1]));
        store.insert(&format!("{prefix}skip.b"), Tensor::zeros(&[1]));
    }
    Ok(())
}

fn layer_count(store_has: impl Fn(&str) -> bool, prefix: &str) -> usize {
    (0..).take_while(|l| store_has(&format!("{prefix}l{l}.w"))).count()
}

fn kernel_from_taps(taps_a: usize) -> Result<usize> {
    let k3 = 2 * taps_a + 1;
    let k = (k3 as f64).cbrt().round() as usize;
    if k * k * k != k3 {
        return Err(shape_err!("{taps_a} taps do not form a causal cubic kernel"));
    }
    Ok(k)
}

/// Teacher-forced logits `[N,1,D,H,W]` for `current`, with the optional
/// neighbor volume added through the scalar skip.
pub fn logits_var<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, current: Var<'t, T>, neighbor: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let layers = layer_count(|n| p.contains(n), prefix);
    if layers < 2 {
        return Err(Error::MissingParam(format!("{prefix}l0.w")));
    }
    let kernel = kernel_from_taps(p.get(&format!("{prefix}l0.w"))?.shape()[2])?;
    let taps_a: Rc<[[isize; 3]]> = causal_taps(kernel, false).into();
    let taps_b: Rc<[[isize; 3]]> = causal_taps(kernel, true).into();
    let mut x = current;
    for l in 0..layers {
        let w = p.get(&format!("{prefix}l{l}.w"))?;
        let b = p.get(&format!("{prefix}l{l}.b"))?;
        x = x.conv3d_taps(w, Some(b), if l == 0 { taps_a.clone() } else { taps_b.clone() })?;
        if l + 1 < layers {
            x = x.leaky_relu(SLOPE);
        }
    }
    if p.contains(&format!("{prefix}skip.w")) {
        let nb = match neighbor {
            Some(v) => v,
            None => p.tape().constant(Tensor::zeros(&x.shape())),
        };
        let skip = nb.conv3d_taps(p.get(&format!("{prefix}skip.w"))?, Some(p.get(&format!("{prefix}skip.b"))?), Rc::from(vec![[0, 0, 0]]))?;
        x = x.add(skip)?;
    }
    Ok(x)
}

/// Mean binary cross-entropy (nats per position) of a batch `[N,1,D,H,W]`.
pub fn entropy_loss_var<'t, T: Scalar>(
    p: &Bound<'t, T>,
    prefix: &str,
    current: &Tensor<T>,
    neighbor: Option<&Tensor<T>>,
) -> Result<Var<'t, T>> {
    if current.is_empty() {
        return Err(Error::InvalidArgument("entropy loss needs a non-empty batch".into()));
    }
    let tape = p.tape();
    let logits = logits_var(p, prefix, tape.constant(current.clone()), neighbor.map(|n| tape.constant(n.clone())))?;
    let targets = current.map(|b| if b > T::zero() { T::one() } else { T::zero() });
    Ok(logits.bce_with_logits_sum(targets)?.scale(1.0 / current.len() as f64))
}

/// Frozen context model evaluated position by position.
///
/// Both the encoder and the decoder obtain probabilities from
/// [`ContextModel::run`], which fixes the accumulation order, so the two
/// sides see bit-identical quantized probabilities.
#[derive(Clone, Debug)]
pub struct ContextModel {
    layers: Vec<Layer>,
    skip: Option<(f32, f32)>,
}

#[derive(Clone, Debug)]
struct Layer {
    cin: usize,
    cout: usize,
    taps: Vec<[isize; 3]>,
    w: Vec<f32>,
    b: Vec<f32>,
}

impl ContextModel {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let count = layer_count(|n| store.contains(n), prefix);
        if count < 2 {
            return Err(Error::MissingParam(format!("{prefix}l0.w")));
        }
        let get = |n: String| store.get(&n).ok_or(Error::MissingParam(n));
        let kernel = kernel_from_taps(get(format!("{prefix}l0.w"))?.shape()[2])?;
        let mut layers = Vec::with_capacity(count);
        for l in 0..count {
            let w = get(format!("{prefix}l{l}.w"))?;
            let b = get(format!("{prefix}l{l}.b"))?;
            let taps = causal_taps(kernel, l > 0);
            let [cout, cin, t] = match *w.shape() {
                [a, b, c] => [a, b, c],
                _ => return Err(shape_err!("entropy layer {l} weight has shape {:?}", w.shape())),
            };
            let expect_cin = if l == 0 { 1 } else { layers.last().map_or(1, |p: &Layer| p.cout) };
            if t != taps.len() || cin != expect_cin || b.shape() != [cout] || (l + 1 == count && cout != 1) {
                return Err(shape_err!("entropy layer {l} has inconsistent shapes {:?}/{:?}", w.shape(), b.shape()));
            }
            layers.push(Layer { cin, cout, taps, w: w.data().to_vec(), b: b.data().to_vec() });
        }
        let skip = match (store.get(&format!("{prefix}skip.w")), store.get(&format!("{prefix}skip.b"))) {
            (Some(w), Some(b)) if w.len() == 1 && b.len() == 1 => Some((w.data()[0], b.data()[0])),
            (None, None) => None,
            _ => return Err(shape_err!("entropy skip parameters are incomplete")),
        };
        Ok(ContextModel { layers, skip })
    }

    pub fn has_skip(&self) -> bool {
        self.skip.is_some()
    }

    /// Visits positions in scan order. `next(i, p_plus)` returns the bit at
    /// position `i`, which becomes visible to later positions.
    pub fn run(
        &self,
        shape: [usize; 3],
        neighbor: Option<&CodeVolume>,
        mut next: impl FnMut(usize, u16) -> Result<i8>,
    ) -> Result<Vec<i8>> {
        let [d, h, w] = shape;
        let vol = d * h * w;
        if let Some(nb) = neighbor {
            if nb.shape() != shape {
                return Err(shape_err!("neighbor volume {:?} does not match {:?}", nb.shape(), shape));
            }
        }
        // acts[0] holds the input bits; acts[l+1] the outputs of layer l.
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(vec![0.0; vol]);
        for l in &self.layers {
            acts.push(vec![0.0; l.cout * vol]);
        }
        let last = self.layers.len() - 1;
        let mut bits = Vec::with_capacity(vol);
        let mut i = 0;
        for z in 0..d as isize {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    for (li, layer) in self.layers.iter().enumerate() {
                        let (lower, upper) = acts.split_at_mut(li + 1);
                        let input = &lower[li];
                        let out = &mut upper[0];
                        for o in 0..layer.cout {
                            let mut acc = layer.b[o];
                            for c in 0..layer.cin {
                                let wrow = &layer.w[(o * layer.cin + c) * layer.taps.len()..][..layer.taps.len()];
                                let plane = &input[c * vol..(c + 1) * vol];
                                for (t, &[od, oh, ow]) in layer.taps.iter().enumerate() {
                                    let (sz, sy, sx) = (z + od, y + oh, x + ow);
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wrow[t] * plane[(sz as usize * h + sy as usize) * w + sx as usize];
                                }
                            }
                            if li < last {
                                acc = if acc >= 0.0 { acc } else { acc * SLOPE as f32 };
                            }
                            out[o * vol + i] = acc;
                        }
                    }
                    let mut logit = acts[last + 1][i];
                    if let Some((sw, sb)) = self.skip {
                        let nb = neighbor.map_or(0.0, |n| n.bits[i] as f32);
                        logit += sw * nb + sb;
                    }
                    let bit = next(i, quantize(logit))?;
                    acts[0][i] = bit as f32;
                    bits.push(bit);
                    i += 1;
                }
            }
        }
        Ok(bits)
    }

    /// Quantized `P(+1)` per position, teacher-forced on `current`.
    pub fn predict_bit_probs(&self, current: &CodeVolume, neighbor: Option<&CodeVolume>) -> Result<Vec<u16>> {
        let mut probs = Vec::with_capacity(current.len());
        self.run(current.shape(), neighbor, |i, p| {
            probs.push(p);
            Ok(current.bits[i])
        })?;
        Ok(probs)
    }

    /// Arithmetic-codes `current` under the model.
    pub fn encode(&self, current: &CodeVolume, neighbor: Option<&CodeVolume>) -> Result<Vec<u8>> {
        let mut enc = BinaryEncoder::new();
        self.run(current.shape(), neighbor, |i, p| {
            enc.encode(current.bits[i], p);
            Ok(current.bits[i])
        })?;
        Ok(enc.finish())
    }

    /// Sequentially decodes a volume of `shape`.
    pub fn decode(&self, payload: &[u8], shape: [usize; 3], neighbor: Option<&CodeVolume>) -> Result<CodeVolume> {
        let mut dec = BinaryDecoder::new(payload)?;
        let bits = self.run(shape, neighbor, |_, p| dec.decode(p))?;
        dec.finish()?;
        CodeVolume::new(shape[0], shape[1], shape[2], bits)
    }

    /// Mean `-ln p(bit)` under the quantized probabilities.
    pub fn cross_entropy(&self, current: &CodeVolume, neighbor: Option<&CodeVolume>) -> Result<f64> {
        let probs = self.predict_bit_probs(current, neighbor)?;
        if probs.is_empty() {
            return Err(Error::InvalidArgument("cross-entropy of an empty volume".into()));
        }
        let total: f64 = current.bits.iter().zip(&probs).map(|(&b, &p)| bit_cost_nats(b, p)).sum();
        Ok(total / probs.len() as f64)
    }
}

/// `-ln P(bit)` for a quantized `P(+1)`.
pub fn bit_cost_nats(bit: i8, p_plus: u16) -> f64 {
    let q = p_plus as f64 / PROB_ONE as f64;
    -(if bit > 0 { q } else { 1.0 - q }).ln()
}

/// `sigmoid(logit)` on a 1/65536 grid, clamped to `[1, 65535]`.
pub fn quantize(logit: f32) -> u16 {
    let p = sigmoid(logit);
    (p * PROB_ONE as f32).round().clamp(1.0, (PROB_ONE - 1) as f32) as u16
}

/// `ac_encode` for a model: probabilities come from the sequential model.
pub fn ac_decode(payload: &[u8], shape: [usize; 3], neighbor: Option<&CodeVolume>, model: &ContextModel) -> Result<CodeVolume> {
    model.decode(payload, shape, neighbor)
}

/// Mean cross-entropy in nats per position over a batch of volumes.
pub fn entropy_loss(model: &ContextModel, volumes: &[CodeVolume], neighbors: &[Option<CodeVolume>]) -> Result<f64> {
    if volumes.is_empty() || volumes.len() != neighbors.len() {
        return Err(Error::InvalidArgument("entropy loss needs matching non-empty batches".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, n) in volumes.iter().zip(neighbors) {
        total += model.cross_entropy(v, n.as_ref())? * v.len() as f64;
        count += v.len();
    }
    Ok(total / count as f64)
}

/// Evaluates the tape model on one volume (teacher forcing), returning
/// float `P(+1)`; used to cross-check the sequential evaluator.
pub fn batched_probs(store: &ParamStore, prefix: &str, current: &CodeVolume, neighbor: Option<&CodeVolume>) -> Result<Vec<f32>> {
    let tape = Tape::<f32>::new();
    let p = store.bind(&tape, |_| false);
    let logits = logits_var(&p, prefix, tape.constant(current.to_tensor()), neighbor.map(|n| tape.constant(n.to_tensor())))?;
    let v = logits.value();
    Ok(v.data().iter().map(|&z| sigmoid(z)).collect())
}
