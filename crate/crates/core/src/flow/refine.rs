use rand::Rng;

use super::FlowPair;
use crate::error::{shape_err, Result};
use crate::frame::Frame;
use crate::numerics::{conv, init_conv, init_conv_zero, Bound, ParamStore, Scalar, Tape, Var};

/// Flows enter the network scaled by this factor.
const FLOW_INPUT_SCALE: f64 = 0.25;
const SLOPE: f64 = 0.1;

/// Depth-2 U-Net widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefineConfig {
    pub c0: usize,
    pub c1: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { c0: 16, c1: 32 }
    }
}

/// Adds the refinement subnet under `{prefix}`. The output head starts at
/// zero so a fresh subnet returns the approximation unchanged.
pub fn init_refine(store: &mut ParamStore, prefix: &str, cfg: RefineConfig, channels: usize, rng: &mut impl Rng) {
    let cin = 4 + 2 * channels;
    let RefineConfig { c0, c1 } = cfg;
    init_conv(store, &format!("{prefix}enc0"), c0, cin, 3, rng);
    init_conv(store, &format!("{prefix}enc1"), c1, c0, 3, rng);
    init_conv(store, &format!("{prefix}mid"), c1, c1, 3, rng);
    init_conv(store, &format!("{prefix}dec1"), c1, 2 * c1, 3, rng);
    init_conv(store, &format!("{prefix}dec0"), c0, c1 + c0, 3, rng);
    init_conv_zero(store, &format!("{prefix}head"), 4, c0, 3);
}

/// Refined `[N,4,H,W]` flows from approximations and both references.
///
/// `H` and `W` must be multiples of 4.
pub fn refine_flows_var<'t, T: Scalar>(
    p: &Bound<'t, T>,
    prefix: &str,
    approx: Var<'t, T>,
    past: Var<'t, T>,
    future: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let s = approx.shape();
    if s.len() != 4 || s[1] != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
        return Err(shape_err!("refinement needs [N,4,H,W] flows with H,W multiples of 4, got {:?}", s));
    }
    let x = Var::concat(&[approx.scale(FLOW_INPUT_SCALE), past, future])?;
    let name = |n: &str| format!("{prefix}{n}");
    let e0 = conv(p, &name("enc0"), x)?.leaky_relu(SLOPE);
    let e1 = conv(p, &name("enc1"), e0.avg_pool2()?)?.leaky_relu(SLOPE);
    let m = conv(p, &name("mid"), e1.avg_pool2()?)?.leaky_relu(SLOPE);
    let d1 = conv(p, &name("dec1"), Var::concat(&[m.upsample2()?, e1])?)?.leaky_relu(SLOPE);
    let d0 = conv(p, &name("dec0"), Var::concat(&[d1.upsample2()?, e0])?)?.leaky_relu(SLOPE);
    let residual = conv(p, &name("head"), d0)?;
    approx.add(residual)
}

/// Inference form of [`refine_flows_var`] for one frame.
pub fn refine_flows(store: &ParamStore, prefix: &str, approx: &FlowPair, past: &Frame, future: &Frame) -> Result<FlowPair> {
    if !past.same_layout(future) || past.width() != approx.width() || past.height() != approx.height() {
        return Err(shape_err!("refinement inputs are not aligned"));
    }
    let tape = Tape::<f32>::new();
    let p = store.bind(&tape, |_| false);
    let out = refine_flows_var(
        &p,
        prefix,
        tape.constant(approx.to_tensor()),
        tape.constant(past.to_tensor()),
        tape.constant(future.to_tensor()),
    )?;
    let value = out.value();
    let mut pair = FlowPair::from_tensor(&value)?;
    pair.to_past.source = approx.to_past.source;
    pair.to_past.target = approx.to_past.target;
    pair.to_future.source = approx.to_future.source;
    pair.to_future.target = approx.to_future.target;
    Ok(pair)
}
