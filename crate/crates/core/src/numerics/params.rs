use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tape::{Bound, Tape};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const WEIGHT_MAGIC: &[u8; 4] = b"BPDW";
const WEIGHT_VERSION: u8 = 1;

/// One trainable tensor plus its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor<f32>,
    m: Tensor<f32>,
    v: Tensor<f32>,
    step: u64,
}

impl Param {
    pub fn new(value: Tensor<f32>) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Param { value, m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named parameters keyed by hierarchical `a/b/c.w` names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

pub type GradMap = BTreeMap<String, Tensor<f32>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<f32>) {
        self.params.insert(name.to_string(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.params.iter().map(|(k, p)| (k, &p.value))
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn merge_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (k, p) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), p.clone());
        }
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (_, p) in self.params.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            p.value.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Binds every parameter onto `tape`; `trainable` selects which ones
    /// have gradients tracked.
    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let mut b = Bound::new(tape);
        for (name, p) in &self.params {
            let t = p.value.cast::<T>();
            let v = if trainable(name) { tape.param(t) } else { tape.constant(t) };
            b.insert(name, v);
        }
        b
    }

    /// Serializes the parameter values in the `BPDW` weight format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.push(WEIGHT_VERSION);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let shape = p.value.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| Error::InvalidArgument(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 1 + 4 + 4 {
            return Err(Error::Truncated("weight file shorter than its fixed header".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        if &body[..4] != WEIGHT_MAGIC {
            return Err(Error::Format("weight file magic is not BPDW".into()));
        }
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checksum("weight file CRC32 does not match".into()));
        }
        let mut r = ByteReader::new(&body[4..]);
        let version = r.u8()?;
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if store.contains(&name) {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            store.insert(&name, Tensor::new(&shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after the last parameter".into()));
        }
        Ok(store)
    }

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Applies one bias-corrected Adam step to every parameter present in
/// `grads`. A non-finite gradient rejects the whole step, leaving the store
/// untouched.
pub fn adam_update(store: &mut ParamStore, grads: &GradMap, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads {
        let p = store.params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.value.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (name, g) in grads {
        let p = store.params.get_mut(name).expect("checked above");
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let values = p.value.data_mut();
        let (m, v) = (p.m.data_mut(), p.v.data_mut());
        for i in 0..values.len() {
            let gi = g.data()[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            values[i] = (values[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// He-style uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("needed {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}
