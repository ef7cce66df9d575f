//! Dense tensors, a reverse-mode gradient tape, the differentiable
//! operators used by the codec networks, and Adam.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{adam_update, clip_global_norm, he_uniform, AdamConfig, GradMap, Param, ParamStore};
pub(crate) use params::ByteReader;
pub use tape::{Bound, Grads, Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::{Scalar, Tensor};

use rand::Rng;

use crate::error::Result;

/// Backward bilinear warp with clamp-to-edge, outside any tape.
pub fn bilinear_warp<T: Scalar>(source: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::warp_forward(source, flow)
}

/// Plain 2-D convolution outside any tape.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight.clone());
    let b = bias.map(|b| tape.constant(b.clone()));
    Ok((*x.conv2d(w, b, stride, padding)?.value()).clone())
}

/// Same-padded convolution using the parameters `{name}.w` and `{name}.b`.
pub fn conv<'t, T: Scalar>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let k = w.shape()[2];
    x.conv2d(w, Some(b), 1, k / 2)
}

/// Adds He-initialized `{name}.w` (`[cout,cin,k,k]`) and a zero `{name}.b`.
pub fn init_conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    store.insert(&format!("{name}.w"), he_uniform(&[cout, cin, k, k], cin * k * k, rng));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Adds an all-zero convolution, used for residual output heads.
pub fn init_conv_zero(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) {
    store.insert(&format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Shape of a convolutional LSTM cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLstmShape {
    pub input: usize,
    pub hidden: usize,
    pub kernel_x: usize,
    pub kernel_h: usize,
}

impl ConvLstmShape {
    /// Parameters: `{name}.wx` `[4H,Cin,kx,kx]`, `{name}.b` `[4H]`,
    /// `{name}.wh` `[4H,H,kh,kh]`. The forget-gate bias starts at zero like
    /// the others.
    pub fn init(&self, store: &mut ParamStore, name: &str, rng: &mut impl Rng) {
        let g = 4 * self.hidden;
        let (kx, kh) = (self.kernel_x, self.kernel_h);
        let fan = self.input * kx * kx + self.hidden * kh * kh;
        store.insert(&format!("{name}.wx"), he_uniform(&[g, self.input, kx, kx], fan, rng));
        store.insert(&format!("{name}.wh"), he_uniform(&[g, self.hidden, kh, kh], fan, rng));
        store.insert(&format!("{name}.b"), Tensor::zeros(&[g]));
    }
}

/// Standard four-gate convolutional LSTM update.
///
/// Gates are laid out `[i, f, o, g]` along the channel axis:
/// `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn conv_lstm_cell<'t, T: Scalar>(
    p: &Bound<'t, T>,
    name: &str,
    x: Var<'t, T>,
    h_prev: Var<'t, T>,
    c_prev: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let wx = p.get(&format!("{name}.wx"))?;
    let wh = p.get(&format!("{name}.wh"))?;
    let b = p.get(&format!("{name}.b"))?;
    let (kx, kh) = (wx.shape()[2], wh.shape()[2]);
    let hidden = wh.shape()[1];
    let hs = h_prev.shape();
    if hs != c_prev.shape() || hs.len() != 4 || hs[1] != hidden {
        return Err(crate::error::shape_err!(
            "conv-lstm `{name}`: hidden {:?} / cell {:?} do not match {hidden} hidden channels",
            hs,
            c_prev.shape()
        ));
    }
    let gx = x.conv2d(wx, Some(b), 1, kx / 2)?;
    let gh = h_prev.conv2d(wh, None, 1, kh / 2)?;
    let gates = gx.add(gh)?;
    let i = gates.slice_channels(0, hidden)?.sigmoid();
    let f = gates.slice_channels(hidden, hidden)?.sigmoid();
    let o = gates.slice_channels(2 * hidden, hidden)?.sigmoid();
    let g = gates.slice_channels(3 * hidden, hidden)?.tanh();
    let c = f.mul(c_prev)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}
