use crate::error::{Error, Result};
use crate::flow::ModelId;
use crate::numerics::ByteReader;

pub const MAGIC: &[u8; 4] = b"BPDV";
pub const VERSION: u8 = 1;
/// Bytes before the first frame record.
pub const HEADER_BYTES: usize = 4 + 1 + 4 + 4 + 1 + 4 + 1 + 1 + 1 + 1 + 1 + 1 + 1 + 8 + 32 + 4;
/// Bytes of framing per frame record, excluding the payload.
pub const RECORD_OVERHEAD: usize = 4 + 1 + 1 + 1 + 4;

pub const FLAG_NO_FLOW_REFINE: u8 = 1;
pub const FLAG_NO_BIPRED_NET: u8 = 2;
pub const FLAG_NO_TEMPORAL_SKIP: u8 = 4;
const KNOWN_FLAGS: u8 = FLAG_NO_FLOW_REFINE | FLAG_NO_BIPRED_NET | FLAG_NO_TEMPORAL_SKIP;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyMode {
    Raw,
    Context,
}

impl EntropyMode {
    fn code(self) -> u8 {
        match self {
            EntropyMode::Raw => 0,
            EntropyMode::Context => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(EntropyMode::Raw),
            1 => Ok(EntropyMode::Context),
            _ => Err(Error::Format(format!("unknown entropy mode {c}"))),
        }
    }
}

impl std::str::FromStr for EntropyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(EntropyMode::Raw),
            "context" => Ok(EntropyMode::Context),
            _ => Err(Error::InvalidArgument(format!("entropy mode must be raw or context, got {s}"))),
        }
    }
}

/// Frame kind byte: intra or one of the bi-prediction models.
pub fn kind_code(model: Option<ModelId>) -> u8 {
    match model {
        None => 0,
        Some(m) if m == ModelId::M12 => 1,
        Some(m) if m == ModelId::M33 => 2,
        Some(_) => 3,
    }
}

fn kind_from_code(c: u8) -> Result<Option<ModelId>> {
    match c {
        0 => Ok(None),
        1 => Ok(Some(ModelId::M12)),
        2 => Ok(Some(ModelId::M33)),
        3 => Ok(Some(ModelId::M66)),
        _ => Err(Error::Format(format!("unknown frame kind {c}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub frame_count: u32,
    pub gop_size: u8,
    pub iterations: u8,
    pub intra_iterations: u8,
    /// Requested mode; each record carries the mode actually used.
    pub entropy: EntropyMode,
    pub flags: u8,
    pub flow_levels: u8,
    pub flow_iters: u8,
    pub arch_hash: u64,
    pub weight_digest: [u8; 32],
    pub record_count: u32,
}

impl Header {
    pub fn has_flag(&self, f: u8) -> bool {
        self.flags & f != 0
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.channels);
        out.extend_from_slice(&self.frame_count.to_le_bytes());
        out.push(self.gop_size);
        out.push(self.iterations);
        out.push(self.intra_iterations);
        out.push(self.entropy.code());
        out.push(self.flags);
        out.push(self.flow_levels);
        out.push(self.flow_iters);
        out.extend_from_slice(&self.arch_hash.to_le_bytes());
        out.extend_from_slice(&self.weight_digest);
        out.extend_from_slice(&self.record_count.to_le_bytes());
    }

    /// Parses only the header, leaving payloads untouched.
    pub fn parse(bytes: &[u8]) -> Result<Header> {
        let mut r = ByteReader::new(bytes);
        Self::read(&mut r)
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Header> {
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a BPDV bitstream".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {version}")));
        }
        let h = Header {
            width: r.u32()?,
            height: r.u32()?,
            channels: r.u8()?,
            frame_count: r.u32()?,
            gop_size: r.u8()?,
            iterations: r.u8()?,
            intra_iterations: r.u8()?,
            entropy: EntropyMode::from_code(r.u8()?)?,
            flags: r.u8()?,
            flow_levels: r.u8()?,
            flow_iters: r.u8()?,
            arch_hash: r.u64()?,
            weight_digest: r.take(32)?.try_into().expect("32 bytes"),
            record_count: r.u32()?,
        };
        if h.flags & !KNOWN_FLAGS != 0 {
            return Err(Error::Format(format!("unknown header flags {:#04x}", h.flags)));
        }
        if h.width == 0 || h.height == 0 || !(h.channels == 1 || h.channels == 3) || h.iterations == 0 || h.intra_iterations == 0 {
            return Err(Error::Format("header has zero dimensions, iterations or an unsupported channel count".into()));
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_index: u32,
    /// `None` for intra frames.
    pub model: Option<ModelId>,
    pub iterations: u8,
    pub entropy: EntropyMode,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub records: Vec<FrameRecord>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.header.write(&mut out);
        for rec in &self.records {
            out.extend_from_slice(&rec.frame_index.to_le_bytes());
            out.push(kind_code(rec.model));
            out.push(rec.iterations);
            out.push(rec.entropy.code());
            out.extend_from_slice(&(rec.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&rec.payload);
        }
        out
    }

    /// Parses records after `check` accepts the header.
    pub fn from_bytes_checked(bytes: &[u8], check: impl FnOnce(&Header) -> Result<()>) -> Result<Bitstream> {
        let mut r = ByteReader::new(bytes);
        let header = Header::read(&mut r)?;
        check(&header)?;
        let mut records = Vec::with_capacity(header.record_count.min(1 << 16) as usize);
        for _ in 0..header.record_count {
            let frame_index = r.u32()?;
            let model = kind_from_code(r.u8()?)?;
            let iterations = r.u8()?;
            let entropy = EntropyMode::from_code(r.u8()?)?;
            let len = r.u32()? as usize;
            let payload = r.take(len)?.to_vec();
            records.push(FrameRecord { frame_index, model, iterations, entropy, payload });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after the last frame record".into()));
        }
        Ok(Bitstream { header, records })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bitstream> {
        Self::from_bytes_checked(bytes, |_| Ok(()))
    }
}
