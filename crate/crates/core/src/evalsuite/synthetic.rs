use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{FlowField, Frame};

/// Frames per synthetic clip: one GOP plus the next anchor.
pub const CLIP_FRAMES: usize = 13;

/// Per-frame motion of the texture under a fixed camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Constant velocity `(vx, vy)` pixels per frame.
    Translation { vx: f64, vy: f64 },
    /// Velocity plus a constant acceleration `accel` along the direction
    /// of travel, in pixels per frame squared.
    Accelerating { vx: f64, vy: f64, accel: f64 },
    /// Translation combined with rotation (radians per frame) and zoom
    /// (relative scale change per frame) about the frame centre.
    Affine { vx: f64, vy: f64, rotation: f64, zoom: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    /// Band-limited noise from two blurred octaves.
    Noise,
    /// Soft-edged checkerboard with per-square random colours.
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    pub motion: Motion,
    pub texture: Texture,
}

/// Which motion family [`ClipSpec::random`] draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Translation,
    Accelerating,
    Affine,
}

impl ClipSpec {
    /// Random spec whose displacement over the 12-frame anchor gap stays
    /// within `height / 8` pixels.
    pub fn random(kind: MotionKind, width: usize, height: usize, rng: &mut impl Rng) -> ClipSpec {
        let limit = height.min(width) as f64 / 8.0;
        let gap = (CLIP_FRAMES - 1) as f64;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos(), angle.sin());
        let motion = match kind {
            MotionKind::Translation => {
                let speed = rng.gen_range(0.15..0.95) * limit / gap;
                Motion::Translation { vx: speed * dx, vy: speed * dy }
            }
            MotionKind::Accelerating => {
                // Quadratic term takes 45-60% of the budget.
                let accel = rng.gen_range(0.45..0.6) * limit * 2.0 / (gap * gap);
                let speed = rng.gen_range(0.1..0.35) * limit / gap;
                Motion::Accelerating { vx: speed * dx, vy: speed * dy, accel }
            }
            MotionKind::Affine => {
                let speed = rng.gen_range(0.1..0.5) * limit / gap;
                let half = width.min(height) as f64 / 2.0;
                let rotation = rng.gen_range(-0.25..0.25) * limit / (gap * half);
                let zoom = rng.gen_range(-0.25..0.25) * limit / (gap * half);
                Motion::Affine { vx: speed * dx, vy: speed * dy, rotation, zoom }
            }
        };
        let texture = if rng.gen_bool(0.75) { Texture::Noise } else { Texture::Checker };
        ClipSpec { width, height, channels: 3, frames: CLIP_FRAMES, motion, texture }
    }
}

impl Motion {
    fn displacement(&self, t: f64) -> (f64, f64) {
        match *self {
            Motion::Translation { vx, vy } | Motion::Affine { vx, vy, .. } => (vx * t, vy * t),
            Motion::Accelerating { vx, vy, accel } => {
                let speed = vx.hypot(vy);
                let (ux, uy) = if speed > 0.0 { (vx / speed, vy / speed) } else { (1.0, 0.0) };
                let q = 0.5 * accel * t * t;
                (vx * t + q * ux, vy * t + q * uy)
            }
        }
    }

    /// Frame-to-texture linear part `A_t` (row-major 2x2).
    fn linear(&self, t: f64) -> [f64; 4] {
        match *self {
            Motion::Affine { rotation, zoom, .. } => {
                let (s, c) = (-rotation * t).sin_cos();
                let k = 1.0 / (1.0 + zoom * t);
                [k * c, -k * s, k * s, k * c]
            }
            _ => [1.0, 0.0, 0.0, 1.0],
        }
    }
}

/// Texture coordinates `T_t(p) = A_t (p - c) + c - d(t)`.
fn to_texture(m: &Motion, t: f64, centre: (f64, f64), p: (f64, f64)) -> (f64, f64) {
    let a = m.linear(t);
    let (d0, d1) = m.displacement(t);
    let (x, y) = (p.0 - centre.0, p.1 - centre.1);
    (a[0] * x + a[1] * y + centre.0 - d0, a[2] * x + a[3] * y + centre.1 - d1)
}

fn from_texture(m: &Motion, t: f64, centre: (f64, f64), u: (f64, f64)) -> (f64, f64) {
    let a = m.linear(t);
    let (d0, d1) = m.displacement(t);
    let (x, y) = (u.0 - centre.0 + d0, u.1 - centre.1 + d1);
    let det = a[0] * a[3] - a[1] * a[2];
    ((a[3] * x - a[1] * y) / det + centre.0, (-a[2] * x + a[0] * y) / det + centre.1)
}

/// Rendered frames with the motion that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    pub spec: ClipSpec,
    pub frames: Vec<Frame>,
}

impl SyntheticClip {
    /// Analytic `F_{a->b}`: `frame_a(p) = frame_b(p + F(p))`.
    pub fn flow(&self, a: usize, b: usize) -> FlowField {
        FlowField::from_fn(self.spec.width, self.spec.height, |x, y| {
            let (dx, dy) = self.flow_at(a, b, x as f64, y as f64);
            (dx as f32, dy as f32)
        })
        .with_indices(a as i64, b as i64)
    }

    /// `F_{a->b}` at an arbitrary point of frame `a`.
    pub fn flow_at(&self, a: usize, b: usize, x: f64, y: f64) -> (f64, f64) {
        let s = &self.spec;
        let centre = ((s.width as f64 - 1.0) / 2.0, (s.height as f64 - 1.0) / 2.0);
        let u = to_texture(&s.motion, a as f64, centre, (x, y));
        let q = from_texture(&s.motion, b as f64, centre, u);
        (q.0 - x, q.1 - y)
    }
}

struct TexturePlane {
    w: usize,
    h: usize,
    origin: f64,
    v: Vec<f64>,
}

impl TexturePlane {
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (x, y) = (x + self.origin, y + self.origin);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |xx: usize, yy: usize| self.v[yy * self.w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
    }
}

fn blur(v: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (k, &gk) in g.iter().enumerate() {
                    let o = k as isize - r;
                    let (sx, sy) = if horizontal { ((x + o).clamp(0, w as isize - 1), y) } else { (x, (y + o).clamp(0, h as isize - 1)) };
                    acc += gk * src[sy as usize * w + sx as usize];
                }
                out[y as usize * w + x as usize] = acc / gs;
            }
        }
        out
    };
    pass(&pass(v, true), false)
}

fn normalize(v: &mut [f64], lo: f64, hi: f64) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    for x in v.iter_mut() {
        *x = lo + (hi - lo) * (*x - min) / span;
    }
}

fn make_texture(spec: &ClipSpec, rng: &mut ChaCha8Rng) -> Vec<TexturePlane> {
    let margin = (spec.width.max(spec.height) / 2 + 8) as f64;
    let (w, h) = (spec.width + 2 * margin as usize, spec.height + 2 * margin as usize);
    let noise = |scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        blur(&raw, w, h, scale)
    };
    let base: Vec<f64> = match spec.texture {
        Texture::Noise => {
            let coarse = noise(3.0, rng);
            let fine = noise(1.0, rng);
            coarse.iter().zip(&fine).map(|(c, f)| 3.0 * c + f).collect()
        }
        Texture::Checker => {
            let cell = rng.gen_range(5..10);
            let levels: Vec<f64> = (0..(w / cell + 1) * (h / cell + 1)).map(|_| rng.gen_range(0.0..1.0)).collect();
            let hard: Vec<f64> = (0..w * h).map(|i| levels[(i / w / cell) * (w / cell + 1) + (i % w) / cell]).collect();
            blur(&hard, w, h, 0.7)
        }
    };
    let mut planes = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let tint = noise(4.0, rng);
        let mut v: Vec<f64> = base.iter().zip(&tint).map(|(b, t)| b + 0.5 * t).collect();
        normalize(&mut v, 0.08, 0.92);
        planes.push(TexturePlane { w, h, origin: margin, v });
    }
    planes
}

/// Renders a clip deterministically from `seed`.
pub fn gen_synthetic_clip(spec: ClipSpec, seed: u64) -> Result<SyntheticClip> {
    if spec.width < 16 || spec.height < 16 || spec.frames == 0 || !(spec.channels == 1 || spec.channels == 3) {
        return Err(Error::InvalidArgument("synthetic clips need >= 16x16 pixels, >= 1 frame and 1 or 3 channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = make_texture(&spec, &mut rng);
    let centre = ((spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0);
    let n = spec.width * spec.height;
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut data = vec![0.0f32; n * spec.channels];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let u = to_texture(&spec.motion, t as f64, centre, (x as f64, y as f64));
                for (c, p) in planes.iter().enumerate() {
                    data[c * n + y * spec.width + x] = p.sample(u.0, u.1) as f32;
                }
            }
        }
        frames.push(Frame::new(spec.width, spec.height, spec.channels, data, t as i64)?);
    }
    Ok(SyntheticClip { spec, frames })
}
