//! Progressive ConvLSTM residual autoencoder with a binary bottleneck.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::frame::{Frame, Signal};
use crate::numerics::{conv, conv_lstm_cell, init_conv, Bound, ConvLstmShape, ParamStore, Scalar, Tape, Tensor, Var};

/// Total spatial downsampling between a frame and its code plane.
pub const CODE_STRIDE: usize = 16;

const SLOPE: f64 = 0.1;
const ENC_LSTMS: [&str; 3] = ["enc.lstm1", "enc.lstm2", "enc.lstm3"];
const DEC_LSTMS: [&str; 4] = ["dec.lstm1", "dec.lstm2", "dec.lstm3", "dec.lstm4"];

/// Layer widths of the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoderConfig {
    pub enc_conv: usize,
    pub enc_hidden: [usize; 3],
    pub bottleneck: usize,
    pub dec_conv: usize,
    /// Each must be a multiple of 4 (depth-to-space by 2 follows).
    pub dec_hidden: [usize; 4],
    pub kernel_x: usize,
    pub kernel_h: usize,
}

impl Default for CoderConfig {
    fn default() -> Self {
        CoderConfig {
            enc_conv: 16,
            enc_hidden: [32, 64, 64],
            bottleneck: 32,
            dec_conv: 64,
            dec_hidden: [64, 64, 32, 32],
            kernel_x: 3,
            kernel_h: 1,
        }
    }
}

impl CoderConfig {
    /// Raw code rate per iteration in bits per pixel.
    pub fn bpp_per_iteration(&self) -> f64 {
        self.bottleneck as f64 / (CODE_STRIDE * CODE_STRIDE) as f64
    }
}

/// Adds encoder (`{prefix}enc.*`), binarizer head (`{prefix}bin`) and
/// decoder (`{prefix}dec.*`) parameters.
pub fn init_coder(store: &mut ParamStore, prefix: &str, cfg: CoderConfig, channels: usize, rng: &mut impl Rng) -> Result<()> {
    if cfg.dec_hidden.iter().any(|h| h % 4 != 0) || cfg.dec_hidden.contains(&0) {
        return Err(Error::InvalidArgument("decoder widths must be positive multiples of 4".into()));
    }
    let n = |s: &str| format!("{prefix}{s}");
    let (kx, kh) = (cfg.kernel_x, cfg.kernel_h);
    init_conv(store, &n("enc.conv"), cfg.enc_conv, 4 * channels, 3, rng);
    let mut cin = 4 * cfg.enc_conv;
    for (name, &h) in ENC_LSTMS.iter().zip(&cfg.enc_hidden) {
        ConvLstmShape { input: cin, hidden: h, kernel_x: kx, kernel_h: kh }.init(store, &n(name), rng);
        cin = 4 * h;
    }
    init_conv(store, &n("bin"), cfg.bottleneck, cfg.enc_hidden[2], 1, rng);
    init_conv(store, &n("dec.conv"), cfg.dec_conv, cfg.bottleneck, 1, rng);
    let mut cin = cfg.dec_conv;
    for (name, &h) in DEC_LSTMS.iter().zip(&cfg.dec_hidden) {
        ConvLstmShape { input: cin, hidden: h, kernel_x: kx, kernel_h: kh }.init(store, &n(name), rng);
        cin = h / 4;
    }
    init_conv(store, &n("dec.out"), channels, cin, 3, rng);
    Ok(())
}

/// Binarizer mode.
pub enum BinarizeMode<'r, R: Rng> {
    /// Sign with ties to `+1`.
    Eval,
    /// `+1` with probability `(1+x)/2`.
    Train(&'r mut R),
}

/// Binarizes values in `[-1,1]`.
pub fn binarize<T: Scalar, R: Rng>(x: &Tensor<T>, mode: BinarizeMode<'_, R>) -> Result<Tensor<T>> {
    let tol = T::of(1e-6);
    if let Some(bad) = x.data().iter().find(|v| !(v.abs() <= T::one() + tol)) {
        return Err(Error::InvalidArgument(format!("binarizer input {bad:?} outside [-1,1]")));
    }
    Ok(match mode {
        BinarizeMode::Eval => x.map(|v| if v >= T::zero() { T::one() } else { -T::one() }),
        BinarizeMode::Train(rng) => {
            let data = x
                .data()
                .iter()
                .map(|&v| {
                    let p = (1.0 + v.as_f64()) * 0.5;
                    if rng.gen::<f64>() < p {
                        T::one()
                    } else {
                        -T::one()
                    }
                })
                .collect();
            Tensor::new(x.shape(), data)?
        }
    })
}

/// Binarization with an identity (straight-through) backward pass.
pub fn binarize_var<'t, T: Scalar, R: Rng>(x: Var<'t, T>, mode: BinarizeMode<'_, R>) -> Result<Var<'t, T>> {
    let b = binarize(&x.value(), mode)?;
    x.straight_through(b)
}

/// Per-frame binary code, `[K][C_b][h][w]` with values `-1`/`+1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTensor {
    pub iterations: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    bits: Vec<i8>,
}

impl CodeTensor {
    pub fn new(iterations: usize, channels: usize, height: usize, width: usize, bits: Vec<i8>) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidArgument("code tensors need at least one iteration".into()));
        }
        if bits.len() != iterations * channels * height * width {
            return Err(shape_err!("code has {} bits, expected {iterations}x{channels}x{height}x{width}", bits.len()));
        }
        if bits.iter().any(|&b| b != 1 && b != -1) {
            return Err(Error::InvalidArgument("code values must be -1 or +1".into()));
        }
        Ok(CodeTensor { iterations, channels, height, width, bits })
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn plane_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Iteration `k` as a `[1,C_b,h,w]` tensor.
    pub fn iteration<T: Scalar>(&self, k: usize) -> Tensor<T> {
        let n = self.plane_len();
        let data = self.bits[k * n..(k + 1) * n].iter().map(|&b| T::of(b as f64)).collect();
        Tensor::new(&[1, self.channels, self.height, self.width], data).expect("code layout")
    }

    /// Total code bits.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// MSB-first packing, `+1 -> 1`, zero-padded to a whole byte.
    pub fn pack_raw(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b > 0 {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack_raw(bytes: &[u8], iterations: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let n = iterations * channels * height * width;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Truncated(format!("raw code payload has {} bytes, expected {}", bytes.len(), n.div_ceil(8))));
        }
        let bits = (0..n).map(|i| if bytes[i / 8] & (0x80 >> (i % 8)) != 0 { 1 } else { -1 }).collect();
        CodeTensor::new(iterations, channels, height, width, bits)
    }
}

fn lstm_hidden<T: Scalar>(p: &Bound<'_, T>, name: &str) -> Result<usize> {
    Ok(p.get(&format!("{name}.wh"))?.shape()[1])
}

/// Recurrent state of a coder instance for one frame.
pub struct CoderState<'t, T: Scalar> {
    enc: Vec<(Var<'t, T>, Var<'t, T>)>,
    dec: Vec<(Var<'t, T>, Var<'t, T>)>,
}

impl<'t, T: Scalar> CoderState<'t, T> {
    /// All-zero state for `[N,*,H,W]` inputs.
    pub fn zeros(p: &Bound<'t, T>, prefix: &str, n: usize, h: usize, w: usize) -> Result<Self> {
        if !h.is_multiple_of(CODE_STRIDE) || !w.is_multiple_of(CODE_STRIDE) || h == 0 || w == 0 {
            return Err(shape_err!("coder input {w}x{h} is not a multiple of {CODE_STRIDE}"));
        }
        let tape = p.tape();
        let zero = |c: usize, s: usize| {
            let t = Tensor::zeros(&[n, c, h / s, w / s]);
            (tape.constant(t.clone()), tape.constant(t))
        };
        let mut enc = Vec::new();
        for (i, name) in ENC_LSTMS.iter().enumerate() {
            enc.push(zero(lstm_hidden(p, &format!("{prefix}{name}"))?, 4 << i));
        }
        let mut dec = Vec::new();
        for (i, name) in DEC_LSTMS.iter().enumerate() {
            dec.push(zero(lstm_hidden(p, &format!("{prefix}{name}"))?, CODE_STRIDE >> i));
        }
        Ok(CoderState { enc, dec })
    }
}

/// Encoder plus binarizer head: residue `[N,C,H,W]` to pre-binarization
/// activations in `[-1,1]`, `[N,C_b,H/16,W/16]`.
pub fn encode_step<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, r: Var<'t, T>, st: &mut CoderState<'t, T>) -> Result<Var<'t, T>> {
    let n = |s: &str| format!("{prefix}{s}");
    let mut x = conv(p, &n("enc.conv"), r.space_to_depth(2)?)?.leaky_relu(SLOPE);
    for (i, name) in ENC_LSTMS.iter().enumerate() {
        let (h, c) = conv_lstm_cell(p, &n(name), x.space_to_depth(2)?, st.enc[i].0, st.enc[i].1)?;
        st.enc[i] = (h, c);
        x = h;
    }
    Ok(conv(p, &n("bin"), x)?.tanh())
}

/// Decoder: bits `[N,C_b,H/16,W/16]` to an output `[N,C,H,W]` in `[-1,1]`.
pub fn decode_step<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, bits: Var<'t, T>, st: &mut CoderState<'t, T>) -> Result<Var<'t, T>> {
    let n = |s: &str| format!("{prefix}{s}");
    let mut x = conv(p, &n("dec.conv"), bits)?.leaky_relu(SLOPE);
    for (i, name) in DEC_LSTMS.iter().enumerate() {
        let (h, c) = conv_lstm_cell(p, &n(name), x, st.dec[i].0, st.dec[i].1)?;
        st.dec[i] = (h, c);
        x = h.depth_to_space(2)?;
    }
    Ok(conv(p, &n("dec.out"), x)?.tanh())
}

/// Result of `K` iterations on one batch of residues.
pub struct ProgressiveVars<'t, T: Scalar> {
    pub bits: Vec<Var<'t, T>>,
    pub outputs: Vec<Var<'t, T>>,
    /// `r^(1..K)`.
    pub residues: Vec<Var<'t, T>>,
}

/// `O^(k) = D(B(E(r^(k-1))))`, `r^(k) = r^(k-1) - O^(k)` on the tape.
///
/// `train_rng` selects stochastic binarization; `None` uses the sign rule.
pub fn progressive_var<'t, T: Scalar, R: Rng>(
    p: &Bound<'t, T>,
    prefix: &str,
    r0: Var<'t, T>,
    k: usize,
    mut train_rng: Option<&mut R>,
) -> Result<ProgressiveVars<'t, T>> {
    if k == 0 {
        return Err(Error::InvalidArgument("progressive coding needs K >= 1".into()));
    }
    let s = r0.shape();
    if s.len() != 4 {
        return Err(shape_err!("residue must be [N,C,H,W], got {:?}", s));
    }
    let mut st = CoderState::zeros(p, prefix, s[0], s[2], s[3])?;
    let mut out = ProgressiveVars { bits: Vec::new(), outputs: Vec::new(), residues: Vec::new() };
    let mut r = r0;
    for _ in 0..k {
        let z = encode_step(p, prefix, r, &mut st)?;
        let mode = match train_rng.as_deref_mut() {
            Some(rng) => BinarizeMode::Train(rng),
            None => BinarizeMode::Eval,
        };
        let b = binarize_var(z, mode)?;
        let o = decode_step(p, prefix, b, &mut st)?;
        r = r.sub(o)?;
        out.bits.push(b);
        out.outputs.push(o);
        out.residues.push(r);
    }
    Ok(out)
}

/// Encoder-side result for one frame.
#[derive(Clone, Debug)]
pub struct Progressive {
    pub codes: CodeTensor,
    pub outputs: Vec<Signal>,
    pub residues: Vec<Signal>,
}

/// Hook replacing the decoder output of iteration `k` (tests only need it).
pub type OutputOverride<'a> = &'a dyn Fn(usize, &Tensor<f32>) -> Option<Tensor<f32>>;

/// Codes `r0` with `k` iterations (eval-mode binarization).
pub fn progressive_encode(store: &ParamStore, prefix: &str, r0: &Signal, k: usize) -> Result<Progressive> {
    progressive_encode_with(store, prefix, r0, k, None)
}

pub fn progressive_encode_with(
    store: &ParamStore,
    prefix: &str,
    r0: &Signal,
    k: usize,
    hook: Option<OutputOverride<'_>>,
) -> Result<Progressive> {
    if k == 0 {
        return Err(Error::InvalidArgument("progressive coding needs K >= 1".into()));
    }
    let tape = Tape::<f32>::new();
    let p = store.bind(&tape, |_| false);
    let mut st = CoderState::zeros(&p, prefix, 1, r0.height, r0.width)?;
    let mut r = tape.constant(r0.to_tensor());
    let mut bits = Vec::new();
    let mut outputs = Vec::new();
    let mut residues = Vec::new();
    let mut plane = [0usize; 3];
    for it in 0..k {
        let z = encode_step(&p, prefix, r, &mut st)?;
        let b = binarize::<f32, rand::rngs::ThreadRng>(&z.value(), BinarizeMode::Eval)?;
        let [_, c, h, w] = b.dims4()?;
        plane = [c, h, w];
        bits.extend(b.data().iter().map(|&v| v as i8));
        let mut o = decode_step(&p, prefix, tape.constant(b), &mut st)?;
        if let Some(f) = hook {
            if let Some(t) = f(it, &o.value()) {
                o = tape.constant(t);
            }
        }
        r = r.sub(o)?;
        outputs.push(Signal::from_tensor(&o.value())?);
        residues.push(Signal::from_tensor(&r.value())?);
    }
    let codes = CodeTensor::new(k, plane[0], plane[1], plane[2], bits)?;
    Ok(Progressive { codes, outputs, residues })
}

/// Decoder-only path: code tensor to `O^(1..K)` for a `width x height` frame.
pub fn progressive_decode(store: &ParamStore, prefix: &str, codes: &CodeTensor, width: usize, height: usize) -> Result<Vec<Signal>> {
    if codes.height * CODE_STRIDE != height || codes.width * CODE_STRIDE != width {
        return Err(shape_err!("code plane {}x{} does not match a {width}x{height} frame", codes.width, codes.height));
    }
    let tape = Tape::<f32>::new();
    let p = store.bind(&tape, |_| false);
    let mut st = CoderState::zeros(&p, prefix, 1, height, width)?;
    let mut outputs = Vec::with_capacity(codes.iterations);
    for it in 0..codes.iterations {
        let o = decode_step(&p, prefix, tape.constant(codes.iteration(it)), &mut st)?;
        outputs.push(Signal::from_tensor(&o.value())?);
    }
    Ok(outputs)
}

/// `clamp(P + sum_k O^(k), 0, 1)`, summing in iteration order.
pub fn reconstruct(prediction: &Frame, outputs: &[Signal]) -> Result<Frame> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("reconstruction needs at least one decoder output".into()));
    }
    let mut acc = prediction.data().to_vec();
    for o in outputs {
        if o.width != prediction.width() || o.height != prediction.height() || o.channels != prediction.channels() {
            return Err(shape_err!("decoder output does not match the prediction layout"));
        }
        for (a, v) in acc.iter_mut().zip(&o.data) {
            *a += v;
        }
    }
    let data = acc.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let mut f = Frame::new(prediction.width(), prediction.height(), prediction.channels(), data, prediction.time_index)?;
    f.decoded = true;
    Ok(f)
}

/// `1/(MK) * sum_m sum_k sum_p |r^(m,k)|`; `residues[m][k]`.
pub fn ae_loss(residues: &[Vec<Signal>]) -> Result<f64> {
    let k = residues.first().map_or(0, |r| r.len());
    if k == 0 || residues.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("autoencoder loss needs M >= 1 patches with the same K >= 1".into()));
    }
    let total: f64 = residues.iter().flatten().map(Signal::abs_sum).sum();
    Ok(total / (residues.len() * k) as f64)
}

/// Tape form of [`ae_loss`] over per-iteration `[M,C,H,W]` residues.
pub fn ae_loss_var<'t, T: Scalar>(residues: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = residues.first().ok_or_else(|| Error::InvalidArgument("autoencoder loss needs K >= 1".into()))?;
    let m = first.shape()[0];
    let mut total = first.abs().sum();
    for r in &residues[1..] {
        total = total.add(r.abs().sum())?;
    }
    Ok(total.scale(1.0 / (m * residues.len()) as f64))
}
