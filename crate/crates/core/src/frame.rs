//! Frames, signed signals and flow fields.

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ByteReader, Tensor};

/// A planar (channel-major) image with samples in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    pub time_index: i64,
    /// `true` for reconstructions, `false` for source frames.
    pub decoded: bool,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>, time_index: i64) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("frames have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(shape_err!("frame data has {} samples, expected {}x{}x{}", data.len(), channels, height, width));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("frame sample {bad} outside [0,1]")));
        }
        Ok(Frame { width, height, channels, data, time_index, decoded: false })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32, time_index: i64) -> Self {
        let v = value.clamp(0.0, 1.0);
        Frame { width, height, channels, data: vec![v; width * height * channels], time_index, decoded: false }
    }

    /// Builds a frame from a `[1,C,H,W]` tensor, clamping samples to `[0,1]`.
    pub fn from_tensor(t: &Tensor<f32>, time_index: i64) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 {
            return Err(shape_err!("expected a single frame, got batch of {n}"));
        }
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Frame::new(w, h, c, data, time_index)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_layout(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn sample(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `[1,C,H,W]` tensor view.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone()).expect("frame layout")
    }

    /// Luma-like single plane: the channel mean.
    pub fn gray(&self) -> Vec<f32> {
        let hw = self.pixel_count();
        if self.channels == 1 {
            return self.data.clone();
        }
        (0..hw).map(|i| (0..self.channels).map(|c| self.data[c * hw + i]).sum::<f32>() / self.channels as f32).collect()
    }

    /// Square crop with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Frame> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(shape_err!("crop {w}x{h}+{x0}+{y0} outside {}x{}", self.width, self.height));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Frame { width: w, height: h, channels: self.channels, data, time_index: self.time_index, decoded: self.decoded })
    }

    pub fn flipped_horizontal(&self) -> Frame {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }
}

/// Unconstrained-sign image (residues, autoencoder outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Signal {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Signal { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 {
            return Err(shape_err!("expected a single signal, got batch of {n}"));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("signal".into()));
        }
        Ok(Signal { width: w, height: h, channels: c, data: t.data().to_vec() })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone()).expect("signal layout")
    }

    /// `frame - other`, sample by sample.
    pub fn difference(a: &Frame, b: &Frame) -> Result<Signal> {
        if !a.same_layout(b) {
            return Err(shape_err!("cannot subtract {}x{} frame from {}x{}", b.width(), b.height(), a.width(), a.height()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(Signal { width: a.width(), height: a.height(), channels: a.channels(), data })
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|v| v.abs() as f64).sum()
    }
}

/// Dense per-pixel displacement `F_{source->target}`.
///
/// Convention: `frame_source(p) ≈ frame_target(p + F(p))`, so backward
/// warping the target frame by this field reconstructs the source frame.
/// Storage is planar: all `dx` values, then all `dy` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<f32>,
    pub source: i64,
    pub target: i64,
}

const FLOW_MAGIC: &[u8; 4] = b"BPFL";

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(shape_err!("flow data has {} values, expected 2x{}x{}", data.len(), height, width));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(FlowField { width, height, data, source: 0, target: 0 })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField { width, height, data: vec![0.0; 2 * width * height], source: 0, target: 0 }
    }

    pub fn constant(width: usize, height: usize, dx: f32, dy: f32) -> Self {
        let hw = width * height;
        let mut data = vec![dx; 2 * hw];
        data[hw..].fill(dy);
        FlowField { width, height, data, source: 0, target: 0 }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        let hw = width * height;
        let mut data = vec![0.0; 2 * hw];
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(x, y);
                data[y * width + x] = dx;
                data[hw + y * width + x] = dy;
            }
        }
        FlowField { width, height, data, source: 0, target: 0 }
    }

    pub fn with_indices(mut self, source: i64, target: i64) -> Self {
        self.source = source;
        self.target = target;
        self
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != 2 {
            return Err(shape_err!("flow tensor must be [1,2,H,W], got {:?}", t.shape()));
        }
        FlowField::new(w, h, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, 2, self.height, self.width], self.data.clone()).expect("flow layout")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.width * self.height + i])
    }

    pub fn same_size(&self, other: &FlowField) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `a * self + b * other`, element-wise.
    pub fn combine(&self, a: f32, other: &FlowField, b: f32) -> Result<FlowField> {
        if !self.same_size(other) {
            return Err(shape_err!("flow sizes {}x{} and {}x{} differ", self.width, self.height, other.width, other.height));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(FlowField { width: self.width, height: self.height, data, source: self.source, target: self.target })
    }

    /// Every component divided by `d`.
    pub fn scaled_div(mut self, d: f32) -> FlowField {
        for v in &mut self.data {
            *v /= d;
        }
        self
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<FlowField> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(shape_err!("crop {w}x{h}+{x0}+{y0} outside {}x{}", self.width, self.height));
        }
        let hw = self.width * self.height;
        let mut data = Vec::with_capacity(2 * w * h);
        for c in 0..2 {
            for y in y0..y0 + h {
                let row = c * hw + y * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(FlowField { width: w, height: h, data, source: self.source, target: self.target })
    }

    /// `BPFL` file: magic, u32 width, u32 height, then per pixel in
    /// row-major order the little-endian f32 pair `(dx, dy)`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut out = Vec::with_capacity(12 + 8 * self.width * self.height);
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for i in 0..self.width * self.height {
            let (dx, dy) = (self.data[i], self.data[self.width * self.height + i]);
            out.extend_from_slice(&dx.to_le_bytes());
            out.extend_from_slice(&dy.to_le_bytes());
        }
        w.write_all(&out)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<FlowField> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut rd = ByteReader::new(&buf);
        if rd.take(4)? != FLOW_MAGIC {
            return Err(Error::Format("flow file magic is not BPFL".into()));
        }
        let (w, h) = (rd.u32()? as usize, rd.u32()? as usize);
        let hw = w.checked_mul(h).ok_or_else(|| Error::Format("flow dimensions overflow".into()))?;
        let raw = rd.take(hw.checked_mul(8).ok_or_else(|| Error::Format("flow dimensions overflow".into()))?)?;
        if !rd.is_empty() {
            return Err(Error::Format("trailing bytes in flow file".into()));
        }
        let mut data = vec![0.0; 2 * hw];
        for (i, px) in raw.chunks_exact(8).enumerate() {
            data[i] = f32::from_le_bytes(px[..4].try_into().expect("4 bytes"));
            data[hw + i] = f32::from_le_bytes(px[4..].try_into().expect("4 bytes"));
        }
        FlowField::new(w, h, data)
    }
}
