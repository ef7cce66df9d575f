use std::path::PathBuf;

use crate::error::{shape_err, Error, Result};
use crate::frame::{FlowField, Frame};

/// Source of anchor-to-anchor flows `F_{a->b}`.
pub trait FlowProvider {
    fn anchor_flow(&self, a: &Frame, b: &Frame) -> Result<FlowField>;
}

/// Coarse-to-fine Lucas-Kanade estimator.
///
/// Each pyramid level runs `iters` Gauss-Newton updates of a windowed
/// least-squares displacement. Local systems whose condition number exceeds
/// `max_condition` keep the current flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidalLk {
    pub levels: usize,
    pub iters: usize,
    pub window_radius: usize,
    pub max_condition: f64,
    /// Largest per-iteration update, in pixels of the current level.
    pub max_step: f64,
}

impl Default for PyramidalLk {
    fn default() -> Self {
        PyramidalLk { levels: 3, iters: 6, window_radius: 3, max_condition: 1e4, max_step: 2.0 }
    }
}

impl PyramidalLk {
    pub fn new(levels: usize, iters: usize) -> Self {
        PyramidalLk { levels, iters, ..Default::default() }
    }
}

impl FlowProvider for PyramidalLk {
    fn anchor_flow(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        self.estimate(a, b)
    }
}

/// `F_{a->b}` with the default estimator settings at the given depth.
pub fn estimate_anchor_flow(a: &Frame, b: &Frame, levels: usize, iters: usize) -> Result<FlowField> {
    PyramidalLk::new(levels, iters).estimate(a, b)
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    /// Bilinear sample with clamp-to-edge, matching the network warp.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let top = self.at(xi, yi) * (1.0 - fx) + self.at(xi + 1, yi) * fx;
        let bot = self.at(xi, yi + 1) * (1.0 - fx) + self.at(xi + 1, yi + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// 5-tap binomial blur then 2x decimation.
    fn down(&self) -> Plane {
        const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0; self.w * self.h];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = (0..5).map(|k| K[k] * self.at(x as isize + k as isize - 2, y as isize)).sum();
            }
        }
        let t = Plane { w: self.w, h: self.h, v: tmp };
        let (w2, h2) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = vec![0.0; w2 * h2];
        for y in 0..h2 {
            for x in 0..w2 {
                v[y * w2 + x] = (0..5).map(|k| K[k] * t.at(2 * x as isize, 2 * y as isize + k as isize - 2)).sum();
            }
        }
        Plane { w: w2, h: h2, v }
    }

    /// Clamped box sum of radius `r`, separable.
    fn box_sum(&self, r: usize) -> Plane {
        let r = r as isize;
        let mut tmp = vec![0.0; self.w * self.h];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = (-r..=r).map(|d| self.at(x as isize + d, y as isize)).sum();
            }
        }
        let t = Plane { w: self.w, h: self.h, v: tmp };
        let mut v = vec![0.0; self.w * self.h];
        for y in 0..self.h {
            for x in 0..self.w {
                v[y * self.w + x] = (-r..=r).map(|d| t.at(x as isize, y as isize + d)).sum();
            }
        }
        Plane { w: self.w, h: self.h, v }
    }
}

impl PyramidalLk {
    pub fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        if !a.same_layout(b) {
            return Err(shape_err!("flow frames differ: {}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height()));
        }
        if self.levels == 0 {
            return Err(Error::InvalidArgument("flow estimation needs at least one pyramid level".into()));
        }
        let min_side = 1usize.checked_shl(self.levels as u32).unwrap_or(usize::MAX);
        if a.width() < min_side || a.height() < min_side {
            return Err(Error::InvalidArgument(format!(
                "{}x{} frames are too small for {} pyramid levels",
                a.width(),
                a.height(),
                self.levels
            )));
        }
        let to_plane = |f: &Frame| Plane { w: f.width(), h: f.height(), v: f.gray().iter().map(|&s| s as f64).collect() };
        let mut pa = vec![to_plane(a)];
        let mut pb = vec![to_plane(b)];
        for l in 1..self.levels {
            let (na, nb) = (pa[l - 1].down(), pb[l - 1].down());
            pa.push(na);
            pb.push(nb);
        }
        let top = &pa[self.levels - 1];
        let mut u = vec![0.0; top.w * top.h];
        let mut v = vec![0.0; top.w * top.h];
        for l in (0..self.levels).rev() {
            let (la, lb) = (&pa[l], &pb[l]);
            if l + 1 < self.levels {
                let coarse = &pa[l + 1];
                let cu = Plane { w: coarse.w, h: coarse.h, v: std::mem::take(&mut u) };
                let cv = Plane { w: coarse.w, h: coarse.h, v: std::mem::take(&mut v) };
                u = vec![0.0; la.w * la.h];
                v = vec![0.0; la.w * la.h];
                for y in 0..la.h {
                    for x in 0..la.w {
                        let (cx, cy) = (x as f64 / 2.0, y as f64 / 2.0);
                        u[y * la.w + x] = 2.0 * cu.sample(cx, cy);
                        v[y * la.w + x] = 2.0 * cv.sample(cx, cy);
                    }
                }
            }
            for _ in 0..self.iters {
                self.refine_level(la, lb, &mut u, &mut v);
            }
        }
        FlowField::new(a.width(), a.height(), u.iter().chain(&v).map(|&d| d as f32).collect())
            .map(|f| f.with_indices(a.time_index, b.time_index))
    }

    fn refine_level(&self, a: &Plane, b: &Plane, u: &mut [f64], v: &mut [f64]) {
        let (w, h) = (a.w, a.h);
        let n = w * h;
        let mut warped = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                warped[i] = b.sample(x as f64 + u[i], y as f64 + v[i]);
            }
        }
        let bw = Plane { w, h, v: warped };
        let mut prods = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = y as usize * w + x as usize;
                let gx = 0.25 * (a.at(x + 1, y) - a.at(x - 1, y) + bw.at(x + 1, y) - bw.at(x - 1, y));
                let gy = 0.25 * (a.at(x, y + 1) - a.at(x, y - 1) + bw.at(x, y + 1) - bw.at(x, y - 1));
                let gt = bw.v[i] - a.v[i];
                prods[0][i] = gx * gx;
                prods[1][i] = gx * gy;
                prods[2][i] = gy * gy;
                prods[3][i] = gx * gt;
                prods[4][i] = gy * gt;
            }
        }
        let s: Vec<Plane> = prods.into_iter().map(|p| Plane { w, h, v: p }.box_sum(self.window_radius)).collect();
        for i in 0..n {
            let (gxx, gxy, gyy, ext, eyt) = (s[0].v[i], s[1].v[i], s[2].v[i], s[3].v[i], s[4].v[i]);
            let tr = gxx + gyy;
            let det = gxx * gyy - gxy * gxy;
            let disc = ((gxx - gyy) * (gxx - gyy) + 4.0 * gxy * gxy).sqrt();
            let (lmax, lmin) = (0.5 * (tr + disc), 0.5 * (tr - disc));
            if lmin <= 1e-12 || lmax > self.max_condition * lmin || det <= 0.0 {
                continue;
            }
            let du = -(gyy * ext - gxy * eyt) / det;
            let dv = -(gxx * eyt - gxy * ext) / det;
            let norm = (du * du + dv * dv).sqrt();
            let k = if norm > self.max_step { self.max_step / norm } else { 1.0 };
            u[i] += k * du;
            v[i] += k * dv;
        }
    }
}

/// Reads flows from `BPFL` files named `{a}_{b}.bpfl` after the frames'
/// time indices.
#[derive(Clone, Debug)]
pub struct FileFlowProvider {
    pub dir: PathBuf,
}

impl FlowProvider for FileFlowProvider {
    fn anchor_flow(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        let path = self.dir.join(format!("{}_{}.bpfl", a.time_index, b.time_index));
        let f = FlowField::read_from(std::fs::File::open(&path)?)?;
        if f.width() != a.width() || f.height() != a.height() {
            return Err(shape_err!("flow file {} does not match the frame size", path.display()));
        }
        Ok(f.with_indices(a.time_index, b.time_index))
    }
}
