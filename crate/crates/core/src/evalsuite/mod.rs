//! Quality and rate metrics, synthetic clips with analytic flow, raw video
//! I/O and rate-distortion point files.

mod metrics;
mod synthetic;
mod video_io;

pub use metrics::{mse, ms_ssim, ms_ssim_scales, psnr, sequence_psnr, ssim, MS_SSIM_WEIGHTS, PSNR_CAP_DB};
pub use synthetic::{gen_synthetic_clip, ClipSpec, Motion, MotionKind, SyntheticClip, Texture, CLIP_FRAMES};
pub use video_io::{
    read_image_sequence, read_pnm, read_video, read_y4m, write_image_sequence, write_pnm, write_video, write_y4m, Video,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Bits per pixel of `total_bytes` (header included) over `num_frames`.
pub fn bpp_of(total_bytes: usize, num_frames: usize, width: usize, height: usize) -> Result<f64> {
    if num_frames == 0 || width == 0 || height == 0 {
        return Err(Error::InvalidArgument("bpp needs at least one non-empty frame".into()));
    }
    Ok((total_bytes * 8) as f64 / (num_frames * width * height) as f64)
}

/// One operating point of a codec configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub label: String,
}

/// Mean PSNR and MS-SSIM of a reconstruction against its reference.
pub fn evaluate(reference: &[Frame], decoded: &[Frame], bitstream_bytes: usize, label: &str) -> Result<RdPoint> {
    let first = reference.first().ok_or_else(|| Error::InvalidArgument("evaluation needs frames".into()))?;
    if reference.len() != decoded.len() {
        return Err(Error::InvalidArgument(format!("{} reference frames but {} decoded", reference.len(), decoded.len())));
    }
    let mut ms = 0.0;
    for (a, b) in reference.iter().zip(decoded) {
        ms += ms_ssim(a, b)?;
    }
    Ok(RdPoint {
        bpp: bpp_of(bitstream_bytes, reference.len(), first.width(), first.height())?,
        psnr_db: sequence_psnr(reference, decoded)?,
        ms_ssim: ms / reference.len() as f64,
        label: label.to_string(),
    })
}

/// Writes `path` as CSV (`bpp,psnr_db,ms_ssim,label`) and a JSON mirror
/// next to it, both sorted by bpp. Returns the JSON path.
pub fn emit_rd(points: &[RdPoint], path: &Path) -> Result<PathBuf> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no RD points to write".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then_with(|| a.label.cmp(&b.label)));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for p in &sorted {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    let json_path = path.with_extension("json");
    fs::write(&json_path, serde_json::to_vec_pretty(&sorted).map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(json_path)
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|p| p.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

#[cfg(test)]
mod tests;
