use crate::error::{shape_err, Error, Result};
use crate::frame::Frame;

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_pair(a: &Frame, b: &Frame) -> Result<()> {
    if !a.same_layout(b) {
        return Err(shape_err!(
            "frames differ in layout: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        ));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1/MSE)` over all samples, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// PSNR of the pooled MSE over a sequence.
pub fn sequence_psnr(a: &[Frame], b: &[Frame]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::InvalidArgument("sequence PSNR needs two non-empty sequences of equal length".into()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += mse(x, y)?;
    }
    let m = total / a.len() as f64;
    Ok(if m == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB) })
}

#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(f: &Frame, c: usize) -> Plane {
        let n = f.pixel_count();
        Plane { w: f.width(), h: f.height(), v: f.data()[c * n..(c + 1) * n].iter().map(|&x| x as f64).collect() }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push((self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]) / 4.0);
            }
        }
        Plane { w, h, v }
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane { w: self.w, h: self.h, v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect() }
    }

    /// Separable Gaussian filtering, valid region only.
    fn filter(&self, g: &[f64]) -> Plane {
        let k = g.len();
        let (ow, oh) = (self.w + 1 - k, self.h + 1 - k);
        let mut tmp = vec![0.0; ow * self.h];
        for y in 0..self.h {
            for x in 0..ow {
                tmp[y * ow + x] = (0..k).map(|i| g[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { w: ow, h: oh, v }
    }
}

pub(crate) fn gaussian_window() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane, g: &[f64]) -> (f64, f64) {
    let mu_a = a.filter(g);
    let mu_b = b.filter(g);
    let saa = a.mul(a).filter(g);
    let sbb = b.mul(b).filter(g);
    let sab = a.mul(b).filter(g);
    let n = mu_a.v.len() as f64;
    let (mut lum, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = saa.v[i] - ma * ma;
        let vb = sbb.v[i] - mb * mb;
        let cov = sab.v[i] - ma * mb;
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let c = (2.0 * cov + C2) / (va + vb + C2);
        lum += l * c;
        cs += c;
    }
    (lum / n, cs / n)
}

/// Single-scale SSIM, averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_pair(a, b)?;
    if a.width() < WINDOW || a.height() < WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs at least {WINDOW}x{WINDOW} pixels")));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..a.channels() {
        total += ssim_terms(&Plane::channel(a, c), &Plane::channel(b, c), &g).0;
    }
    Ok(total / a.channels() as f64)
}

/// Number of scales evaluated for a `width x height` image (at most 5).
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let mut m = 0;
    let mut s = width.min(height);
    while m < MS_SSIM_WEIGHTS.len() && s >= WINDOW {
        m += 1;
        s /= 2;
    }
    m
}

/// Multi-scale SSIM with an 11x11 Gaussian window. Images smaller than
/// 176 pixels use fewer scales with the leading exponents renormalized.
pub fn ms_ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_pair(a, b)?;
    let scales = ms_ssim_scales(a.width(), a.height());
    if scales == 0 {
        return Err(Error::InvalidArgument(format!("MS-SSIM needs at least {WINDOW}x{WINDOW} pixels")));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (mut pa, mut pb) = (Plane::channel(a, c), Plane::channel(b, c));
        let mut value = 1.0;
        for (j, &w) in weights.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&pa, &pb, &g);
            let term = if j + 1 == scales { ssim } else { cs };
            value *= term.max(0.0).powf(w / wsum);
            if j + 1 < scales {
                pa = pa.downsample();
                pb = pb.downsample();
            }
        }
        total += value;
    }
    Ok(total / a.channels() as f64)
}
