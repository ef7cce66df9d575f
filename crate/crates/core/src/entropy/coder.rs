//! 32-bit binary range coder with byte-wise renormalization.
//!
//! Probabilities are `p_plus / 65536` for the `+1` symbol. The carry
//! handling follows the classic cache/low scheme; the always-zero leading
//! byte of that scheme is not stored, so the flush costs exactly 4 bytes.

use crate::error::{shape_err, Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_ONE: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Bytes emitted for an empty message.
pub const TERMINATION_BYTES: usize = 4;

pub struct BinaryEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for BinaryEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl BinaryEncoder {
    pub fn new() -> Self {
        BinaryEncoder { low: 0, range: u32::MAX, cache: 0, pending: 1, skip_first: true, out: Vec::new() }
    }

    fn emit(&mut self, b: u8) {
        if self.skip_first {
            debug_assert_eq!(b, 0);
            self.skip_first = false;
        } else {
            self.out.push(b);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes `bit` (`> 0` means `+1`) with `P(+1) = p_plus / 65536`.
    pub fn encode(&mut self, bit: i8, p_plus: u16) {
        debug_assert!(p_plus > 0);
        let bound = (self.range >> PROB_BITS) * p_plus as u32;
        if bit > 0 {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct BinaryDecoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> BinaryDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = BinaryDecoder { buf, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| Error::Truncated(format!("arithmetic-coded payload ended after {} bytes", self.buf.len())))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, p_plus: u16) -> Result<i8> {
        let bound = (self.range >> PROB_BITS) * p_plus as u32;
        let bit = if self.code < bound {
            self.range = bound;
            1
        } else {
            self.code -= bound;
            self.range -= bound;
            -1
        };
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(bit)
    }

    /// Fails unless every payload byte was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} unused bytes after arithmetic-coded payload", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Codes `bits` with per-position probabilities.
pub fn ac_encode(bits: &[i8], probs: &[u16]) -> Result<Vec<u8>> {
    if bits.len() != probs.len() {
        return Err(shape_err!("{} bits but {} probabilities", bits.len(), probs.len()));
    }
    if probs.contains(&0) {
        return Err(Error::InvalidArgument("zero probability for the +1 symbol".into()));
    }
    let mut enc = BinaryEncoder::new();
    for (&b, &p) in bits.iter().zip(probs) {
        enc.encode(b, p);
    }
    Ok(enc.finish())
}

/// Inverse of [`ac_encode`] for known probabilities.
pub fn ac_decode_with_probs(payload: &[u8], probs: &[u16]) -> Result<Vec<i8>> {
    let mut dec = BinaryDecoder::new(payload)?;
    let bits = probs.iter().map(|&p| dec.decode(p)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(bits)
}
