//! Raw forward/backward kernels behind the tape operations.
//!
//! All kernels loop in a fixed order so that identical inputs give
//! bit-identical outputs.

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, wd] = match *x {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(shape_err!("conv2d input must be [N,C,H,W], got {x:?}")),
        };
        let [cout, wcin, kh, kw] = match *w {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(shape_err!("conv2d weight must be [Cout,Cin,kh,kw], got {w:?}")),
        };
        if wcin != cin {
            return Err(shape_err!("conv2d weight expects {wcin} input channels, input has {cin}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv2d kernel must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be at least 1"));
        }
        let span_h = (h + 2 * pad).checked_sub(kh).ok_or_else(|| shape_err!("conv2d kernel {kh} larger than padded height {}", h + 2 * pad))?;
        let span_w = (wd + 2 * pad).checked_sub(kw).ok_or_else(|| shape_err!("conv2d kernel {kw} larger than padded width {}", wd + 2 * pad))?;
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(shape_err!(
                "conv2d output size is not exact: ({h}+2*{pad}-{kh})/{stride} or ({wd}+2*{pad}-{kw})/{stride} has a remainder"
            ));
        }
        Ok(Conv2dGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, ho: span_h / stride + 1, wo: span_w / stride + 1 })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeom, cols: &mut [T]) {
    let (hw_out, pad) = (g.ho * g.wo, g.pad as isize);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + kj as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let (hw_out, pad) = (g.ho * g.wo, g.pad as isize);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride) as isize + kj as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &Conv2dGeom) -> Tensor<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * ncols;
    let mut out = vec![T::zero(); g.n * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    let wm = MatRef::row_major(w.data(), g.cout, rows);
    for n in 0..g.n {
        let xn = &x.data()[n * in_per..(n + 1) * in_per];
        let colref = if g.is_pointwise() {
            MatRef::row_major(xn, rows, ncols)
        } else {
            im2col(xn, g, &mut cols);
            MatRef::row_major(&cols, rows, ncols)
        };
        let on = &mut out[n * out_per..(n + 1) * out_per];
        gemm(wm, colref, T::zero(), on);
        if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut on[co * ncols..(co + 1) * ncols] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out).expect("conv2d output shape")
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: &Conv2dGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * ncols;
    let mut dx = need[0].then(|| vec![T::zero(); g.n * in_per]);
    let mut dw = need[1].then(|| vec![T::zero(); g.cout * rows]);
    let mut db = need[2].then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
    let mut dcols = vec![T::zero(); if dx.is_some() && !g.is_pointwise() { rows * ncols } else { 0 }];
    let wm = MatRef::row_major(w.data(), g.cout, rows);
    for n in 0..g.n {
        let dyn_ = &dy.data()[n * out_per..(n + 1) * out_per];
        let dym = MatRef::row_major(dyn_, g.cout, ncols);
        if let Some(dw) = dw.as_mut() {
            let xn = &x.data()[n * in_per..(n + 1) * in_per];
            let colref = if g.is_pointwise() {
                MatRef::row_major(xn, rows, ncols)
            } else {
                im2col(xn, g, &mut cols);
                MatRef::row_major(&cols, rows, ncols)
            };
            gemm(dym, colref.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                gemm(wm.t(), dym, T::one(), dxn);
            } else {
                gemm(wm.t(), dym, T::zero(), &mut dcols);
                col2im(&dcols, g, dxn);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyn_[co * ncols..(co + 1) * ncols].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")),
        dw: dw.map(|d| Tensor::new(w.shape(), d).expect("dw shape")),
        db: db.map(|d| Tensor::new(&[g.cout], d).expect("db shape")),
    }
}

/// Geometry of a same-size 3-D convolution over an explicit list of kernel taps.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv3dGeom {
    pub n: usize,
    pub cin: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub taps: usize,
}

impl Conv3dGeom {
    pub fn new(x: &[usize], w: &[usize], taps: usize) -> Result<Self> {
        let [n, cin, d, h, wd] = match *x {
            [a, b, c, d, e] => [a, b, c, d, e],
            _ => return Err(shape_err!("conv3d input must be [N,C,D,H,W], got {x:?}")),
        };
        let [cout, wcin, t] = match *w {
            [a, b, c] => [a, b, c],
            _ => return Err(shape_err!("conv3d weight must be [Cout,Cin,taps], got {w:?}")),
        };
        if wcin != cin || t != taps {
            return Err(shape_err!("conv3d weight {w:?} incompatible with input {x:?} and {taps} taps"));
        }
        Ok(Conv3dGeom { n, cin, d, h, w: wd, cout, taps })
    }

    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }
}

fn im2col3d<T: Scalar>(x: &[T], g: &Conv3dGeom, taps: &[[isize; 3]], cols: &mut [T]) {
    let vol = g.vol();
    for c in 0..g.cin {
        let src = &x[c * vol..(c + 1) * vol];
        for (t, &[od, oh, ow]) in taps.iter().enumerate() {
            let dst = &mut cols[(c * g.taps + t) * vol..(c * g.taps + t + 1) * vol];
            let mut i = 0;
            for d in 0..g.d as isize {
                for h in 0..g.h as isize {
                    for w in 0..g.w as isize {
                        let (sd, sh, sw) = (d + od, h + oh, w + ow);
                        dst[i] = if sd < 0 || sh < 0 || sw < 0 || sd >= g.d as isize || sh >= g.h as isize || sw >= g.w as isize {
                            T::zero()
                        } else {
                            src[(sd as usize * g.h + sh as usize) * g.w + sw as usize]
                        };
                        i += 1;
                    }
                }
            }
        }
    }
}

fn col2im3d<T: Scalar>(cols: &[T], g: &Conv3dGeom, taps: &[[isize; 3]], dx: &mut [T]) {
    let vol = g.vol();
    for c in 0..g.cin {
        let dst = &mut dx[c * vol..(c + 1) * vol];
        for (t, &[od, oh, ow]) in taps.iter().enumerate() {
            let src = &cols[(c * g.taps + t) * vol..(c * g.taps + t + 1) * vol];
            let mut i = 0;
            for d in 0..g.d as isize {
                for h in 0..g.h as isize {
                    for w in 0..g.w as isize {
                        let (sd, sh, sw) = (d + od, h + oh, w + ow);
                        if !(sd < 0 || sh < 0 || sw < 0 || sd >= g.d as isize || sh >= g.h as isize || sw >= g.w as isize) {
                            dst[(sd as usize * g.h + sh as usize) * g.w + sw as usize] += src[i];
                        }
                        i += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    taps: &[[isize; 3]],
    g: &Conv3dGeom,
) -> Tensor<T> {
    let vol = g.vol();
    let rows = g.cin * g.taps;
    let mut out = vec![T::zero(); g.n * g.cout * vol];
    let mut cols = vec![T::zero(); rows * vol];
    let wm = MatRef::row_major(w.data(), g.cout, rows);
    for n in 0..g.n {
        im2col3d(&x.data()[n * g.cin * vol..(n + 1) * g.cin * vol], g, taps, &mut cols);
        let on = &mut out[n * g.cout * vol..(n + 1) * g.cout * vol];
        gemm(wm, MatRef::row_major(&cols, rows, vol), T::zero(), on);
        if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                for v in &mut on[co * vol..(co + 1) * vol] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.d, g.h, g.w], out).expect("conv3d output shape")
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    taps: &[[isize; 3]],
    g: &Conv3dGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let vol = g.vol();
    let rows = g.cin * g.taps;
    let mut dx = need[0].then(|| vec![T::zero(); g.n * g.cin * vol]);
    let mut dw = need[1].then(|| vec![T::zero(); g.cout * rows]);
    let mut db = need[2].then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); rows * vol];
    let wm = MatRef::row_major(w.data(), g.cout, rows);
    for n in 0..g.n {
        let dyn_ = &dy.data()[n * g.cout * vol..(n + 1) * g.cout * vol];
        let dym = MatRef::row_major(dyn_, g.cout, vol);
        if let Some(dw) = dw.as_mut() {
            im2col3d(&x.data()[n * g.cin * vol..(n + 1) * g.cin * vol], g, taps, &mut cols);
            gemm(dym, MatRef::row_major(&cols, rows, vol).t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(wm.t(), dym, T::zero(), &mut cols);
            col2im3d(&cols, g, taps, &mut dx[n * g.cin * vol..(n + 1) * g.cin * vol]);
        }
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyn_[co * vol..(co + 1) * vol].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d).expect("dx shape")),
        dw: dw.map(|d| Tensor::new(w.shape(), d).expect("dw shape")),
        db: db.map(|d| Tensor::new(&[g.cout], d).expect("db shape")),
    }
}

/// Clamped sample coordinate, the integer cell it falls in and whether the
/// coordinate was strictly inside the valid range (derivative passes).
#[inline]
fn sample_axis<T: Scalar>(base: usize, offset: T, len: usize) -> (usize, usize, T, bool) {
    let max = T::of((len - 1) as f64);
    let raw = T::of(base as f64) + offset;
    let inside = raw > T::zero() && raw < max;
    let p = if raw < T::zero() { T::zero() } else if raw > max { max } else { raw };
    let i0 = p.floor().as_f64() as usize;
    let i0 = i0.min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - T::of(i0 as f64), inside)
}

/// Backward bilinear warp with clamp-to-edge: `out(p) = src(p + flow(p))`.
pub(crate) fn warp_forward<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = src.dims4()?;
    let fd = flow.dims4()?;
    if fd != [n, 2, h, w] {
        return Err(shape_err!("flow shape {:?} does not match source {:?}", flow.shape(), src.shape()));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); src.len()];
    let (s, f) = (src.data(), flow.data());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, ax, _) = sample_axis(x, f[(b * 2) * hw + p], w);
                let (y0, y1, ay, _) = sample_axis(y, f[(b * 2 + 1) * hw + p], h);
                let (w00, w01) = ((T::one() - ax) * (T::one() - ay), ax * (T::one() - ay));
                let (w10, w11) = ((T::one() - ax) * ay, ax * ay);
                for ch in 0..c {
                    let pl = &s[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    out[(b * c + ch) * hw + p] =
                        w00 * pl[y0 * w + x0] + w01 * pl[y0 * w + x1] + w10 * pl[y1 * w + x0] + w11 * pl[y1 * w + x1];
                }
            }
        }
    }
    Tensor::new(src.shape(), out)
}

pub(crate) fn warp_backward<T: Scalar>(
    src: &Tensor<T>,
    flow: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, c, h, w] = src.dims4().expect("warp source");
    let hw = h * w;
    let (s, f, g) = (src.data(), flow.data(), dy.data());
    let mut dsrc = need[0].then(|| vec![T::zero(); src.len()]);
    let mut dflow = need[1].then(|| vec![T::zero(); flow.len()]);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, ax, in_x) = sample_axis(x, f[(b * 2) * hw + p], w);
                let (y0, y1, ay, in_y) = sample_axis(y, f[(b * 2 + 1) * hw + p], h);
                let one = T::one();
                let mut gx = T::zero();
                let mut gy = T::zero();
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let go = g[base + p];
                    if let Some(ds) = dsrc.as_mut() {
                        ds[base + y0 * w + x0] += go * (one - ax) * (one - ay);
                        ds[base + y0 * w + x1] += go * ax * (one - ay);
                        ds[base + y1 * w + x0] += go * (one - ax) * ay;
                        ds[base + y1 * w + x1] += go * ax * ay;
                    }
                    if dflow.is_some() {
                        let (v00, v01, v10, v11) = (s[base + y0 * w + x0], s[base + y0 * w + x1], s[base + y1 * w + x0], s[base + y1 * w + x1]);
                        gx += go * ((one - ay) * (v01 - v00) + ay * (v11 - v10));
                        gy += go * ((one - ax) * (v10 - v00) + ax * (v11 - v01));
                    }
                }
                if let Some(df) = dflow.as_mut() {
                    if in_x {
                        df[(b * 2) * hw + p] += gx;
                    }
                    if in_y {
                        df[(b * 2 + 1) * hw + p] += gy;
                    }
                }
            }
        }
    }
    (
        dsrc.map(|d| Tensor::new(src.shape(), d).expect("dsrc shape")),
        dflow.map(|d| Tensor::new(flow.shape(), d).expect("dflow shape")),
    )
}

/// Rearranges blocks of `r x r` pixels; `forward = true` is depth-to-space.
pub(crate) fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize, to_space: bool) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (oc, oh, ow) = if to_space {
        if c % (r * r) != 0 {
            return Err(shape_err!("depth-to-space needs channels divisible by {}, got {c}", r * r));
        }
        (c / (r * r), h * r, w * r)
    } else {
        if h % r != 0 || w % r != 0 {
            return Err(shape_err!("space-to-depth needs spatial size divisible by {r}, got {h}x{w}"));
        }
        (c * r * r, h / r, w / r)
    };
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    // Iterate over the space-side layout [n, cs, hs, ws] and map to depth side.
    let (cs, hs, ws, hd, wd) = if to_space { (oc, oh, ow, h, w) } else { (c, h, w, oh, ow) };
    let cd = cs * r * r;
    for b in 0..n {
        for ch in 0..cs {
            for ys in 0..hs {
                for xs in 0..ws {
                    let (yd, i, xd_, j) = (ys / r, ys % r, xs / r, xs % r);
                    let dch = ch * r * r + i * r + j;
                    let si = ((b * cs + ch) * hs + ys) * ws + xs;
                    let di = ((b * cd + dch) * hd + yd) * wd + xd_;
                    if to_space {
                        out[si] = xd[di];
                    } else {
                        out[di] = xd[si];
                    }
                }
            }
        }
    }
    Tensor::new(&[n, oc, oh, ow], out)
}

pub(crate) fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avg_pool2 needs even spatial size, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = p * h * w + 2 * y * w + 2 * xx;
                out[(p * oh + y) * ow + xx] = (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]) * quarter;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let [n, c, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * c * h * w];
    let g = dy.data();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = g[(p * oh + y) * ow + xx] * quarter;
                let i = p * h * w + 2 * y * w + 2 * xx;
                out[i] = v;
                out[i + 1] = v;
                out[i + w] = v;
                out[i + w + 1] = v;
            }
        }
    }
    Tensor::new(in_shape, out).expect("pool grad shape")
}

pub(crate) fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = xd[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn upsample2_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let [n, c, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    let (oh, ow) = (2 * h, 2 * w);
    let g = dy.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
            }
        }
    }
    Tensor::new(in_shape, out).expect("upsample grad shape")
}
