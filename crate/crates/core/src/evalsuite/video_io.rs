use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Frames plus what the container said about them.
#[derive(Clone, Debug)]
pub struct Video {
    pub frames: Vec<Frame>,
    /// Frame rate as a fraction; `25:1` when the container has none.
    pub fps: (u32, u32),
    /// Chroma was resampled on ingest, so samples are not the stored ones.
    pub lossy_ingest: bool,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Y4M for `*.y4m`, otherwise a directory of numbered PPM/PGM images.
pub fn read_video(path: &Path) -> Result<Video> {
    if is_y4m(path) {
        read_y4m(BufReader::new(fs::File::open(path)?))
    } else if path.is_dir() {
        read_image_sequence(path)
    } else {
        Err(Error::InvalidArgument(format!("{} is neither a .y4m file nor a directory of PPM/PGM frames", path.display())))
    }
}

pub fn write_video(path: &Path, video: &Video) -> Result<()> {
    if is_y4m(path) {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_y4m(&mut w, &video.frames, video.fps)?;
        w.flush()?;
        Ok(())
    } else {
        write_image_sequence(path, &video.frames)
    }
}

fn is_y4m(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Chroma {
    C444,
    C420,
    Mono,
}

fn read_line(r: &mut impl BufRead) -> Result<Option<String>> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.pop() != Some(b'\n') {
        return Err(Error::Truncated("Y4M line without terminating newline".into()));
    }
    String::from_utf8(buf).map(Some).map_err(|_| fmt_err("Y4M header is not ASCII"))
}

/// Reads YUV4MPEG2 with `C444`, `C420*` or `Cmono` sampling. Planes are
/// kept as stored (no colour conversion); 4:2:0 chroma is bilinearly
/// upsampled to full resolution.
pub fn read_y4m(mut r: impl BufRead) -> Result<Video> {
    let header = read_line(&mut r)?.ok_or_else(|| fmt_err("empty Y4M stream"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(fmt_err("missing YUV4MPEG2 signature"));
    }
    let (mut w, mut h, mut fps, mut chroma) = (None, None, (25, 1), Chroma::C420);
    for t in tokens.filter(|t| !t.is_empty()) {
        let (tag, val) = t.split_at(1);
        match tag {
            "W" => w = Some(val.parse::<usize>().map_err(|_| fmt_err(format!("bad width {val}")))?),
            "H" => h = Some(val.parse::<usize>().map_err(|_| fmt_err(format!("bad height {val}")))?),
            "F" => {
                let (n, d) = val.split_once(':').ok_or_else(|| fmt_err(format!("bad frame rate {val}")))?;
                let parse = |s: &str| s.parse::<u32>().map_err(|_| fmt_err(format!("bad frame rate {val}")));
                fps = (parse(n)?, parse(d)?);
            }
            "C" => {
                chroma = match val {
                    "444" => Chroma::C444,
                    v if v.starts_with("420") => Chroma::C420,
                    "mono" => Chroma::Mono,
                    other => return Err(fmt_err(format!("unsupported Y4M chroma C{other}"))),
                }
            }
            "I" | "A" | "X" => {}
            other => return Err(fmt_err(format!("unknown Y4M header tag {other}"))),
        }
    }
    let (w, h) = match (w, h) {
        (Some(w), Some(h)) if w > 0 && h > 0 => (w, h),
        _ => return Err(fmt_err("Y4M header lacks positive W and H")),
    };
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let frame_bytes = match chroma {
        Chroma::C444 => 3 * w * h,
        Chroma::C420 => w * h + 2 * cw * ch,
        Chroma::Mono => w * h,
    };
    let mut frames = Vec::new();
    let mut buf = vec![0u8; frame_bytes];
    while let Some(line) = read_line(&mut r)? {
        if !line.starts_with("FRAME") {
            return Err(fmt_err("expected FRAME marker"));
        }
        r.read_exact(&mut buf).map_err(|_| Error::Truncated(format!("Y4M frame {} is incomplete", frames.len())))?;
        let to_f = |b: &[u8]| b.iter().map(|&v| v as f32 / 255.0).collect::<Vec<f32>>();
        let (channels, data) = match chroma {
            Chroma::Mono => (1, to_f(&buf)),
            Chroma::C444 => (3, to_f(&buf)),
            Chroma::C420 => {
                let mut data = to_f(&buf[..w * h]);
                for p in 0..2 {
                    let plane = to_f(&buf[w * h + p * cw * ch..w * h + (p + 1) * cw * ch]);
                    data.extend(upsample_chroma(&plane, cw, ch, w, h));
                }
                (3, data)
            }
        };
        frames.push(Frame::new(w, h, channels, data, frames.len() as i64)?);
    }
    if frames.is_empty() {
        return Err(fmt_err("Y4M stream has no frames"));
    }
    Ok(Video { frames, fps, lossy_ingest: chroma == Chroma::C420 })
}

/// Centre-sited bilinear upsampling of a half-resolution plane.
fn upsample_chroma(plane: &[f32], cw: usize, ch: usize, w: usize, h: usize) -> Vec<f32> {
    let at = |x: isize, y: isize| plane[y.clamp(0, ch as isize - 1) as usize * cw + x.clamp(0, cw as isize - 1) as usize];
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (y as f32 + 0.5) / 2.0 - 0.5;
        let (y0, fy) = (sy.floor(), sy - sy.floor());
        for x in 0..w {
            let sx = (x as f32 + 0.5) / 2.0 - 0.5;
            let (x0, fx) = (sx.floor(), sx - sx.floor());
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = (1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0);
            let bottom = (1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1);
            out.push((1.0 - fy) * top + fy * bottom);
        }
    }
    out
}

/// Writes `C444` (3 channels) or `Cmono` (1 channel), 8 bits per sample.
pub fn write_y4m(w: &mut impl Write, frames: &[Frame], fps: (u32, u32)) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("cannot write an empty video".into()))?;
    if frames.iter().any(|f| !f.same_layout(first)) {
        return Err(Error::InvalidArgument("all frames must share one layout".into()));
    }
    let c = if first.channels() == 1 { "mono" } else { "444" };
    writeln!(w, "YUV4MPEG2 W{} H{} F{}:{} Ip A1:1 C{c}", first.width(), first.height(), fps.0, fps.1)?;
    for f in frames {
        w.write_all(b"FRAME\n")?;
        w.write_all(&f.data().iter().map(|&v| quantize(v)).collect::<Vec<u8>>())?;
    }
    Ok(())
}

fn pnm_token(data: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Truncated("PNM header ends early".into()));
    }
    Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

/// Binary PPM (`P6`) or PGM (`P5`), 8- or 16-bit.
pub fn read_pnm(data: &[u8], time_index: i64) -> Result<Frame> {
    let mut pos = 0;
    let magic = pnm_token(data, &mut pos)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(fmt_err(format!("unsupported PNM magic {m}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        let t = pnm_token(data, &mut pos)?;
        t.parse().map_err(|_| fmt_err(format!("bad PNM {what} {t}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(fmt_err("PNM dimensions and maxval must be positive, maxval <= 65535"));
    }
    pos += 1;
    let bytes = if maxval < 256 { 1 } else { 2 };
    let n = w * h * channels;
    let body = data.get(pos..pos + n * bytes).ok_or_else(|| Error::Truncated("PNM pixel data is incomplete".into()))?;
    let samples: Vec<f32> = if bytes == 1 {
        body.iter().map(|&v| v as f32 / maxval as f32).collect()
    } else {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval as f32).collect()
    };
    // Interleaved RGB to planar.
    let mut data = vec![0.0; n];
    for i in 0..w * h {
        for c in 0..channels {
            data[c * w * h + i] = samples[i * channels + c].min(1.0);
        }
    }
    Frame::new(w, h, channels, data, time_index)
}

pub fn write_pnm(w: &mut impl Write, f: &Frame) -> Result<()> {
    let magic = if f.channels() == 1 { "P5" } else { "P6" };
    write!(w, "{magic}\n{} {}\n255\n", f.width(), f.height())?;
    let n = f.pixel_count();
    let mut out = Vec::with_capacity(n * f.channels());
    for i in 0..n {
        for c in 0..f.channels() {
            out.push(quantize(f.data()[c * n + i]));
        }
    }
    w.write_all(&out)?;
    Ok(())
}

fn frame_number(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect::<Vec<_>>().into_iter().rev().collect();
    digits.parse().ok()
}

/// Numbered `*.ppm`/`*.pgm` files in ascending frame-number order.
pub fn read_image_sequence(dir: &Path) -> Result<Video> {
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("ppm") | Some("pgm")) {
            let n = frame_number(&p).ok_or_else(|| fmt_err(format!("{} has no frame number", p.display())))?;
            files.push((n, p));
        }
    }
    if files.is_empty() {
        return Err(fmt_err(format!("no PPM/PGM frames in {}", dir.display())));
    }
    files.sort();
    let mut frames: Vec<Frame> = Vec::with_capacity(files.len());
    for (i, (_, p)) in files.iter().enumerate() {
        let f = read_pnm(&fs::read(p)?, i as i64)?;
        if let Some(first) = frames.first() {
            if !f.same_layout(first) {
                return Err(fmt_err(format!("{} differs in size or channels from the first frame", p.display())));
            }
        }
        frames.push(f);
    }
    Ok(Video { frames, fps: (25, 1), lossy_ingest: false })
}

/// Writes `frame_0000.ppm` (or `.pgm`) and so on into `dir`.
pub fn write_image_sequence(dir: &Path, frames: &[Frame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("cannot write an empty video".into()));
    }
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        let ext = if f.channels() == 1 { "pgm" } else { "ppm" };
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("frame_{i:04}.{ext}")))?);
        write_pnm(&mut w, f)?;
        w.flush()?;
    }
    Ok(())
}
