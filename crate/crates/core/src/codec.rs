//! K-bit affine quantization with a packed little-endian wire format.
//!
//! Wire layout:
//!
//! ```text
//! [min: f32 LE][max: f32 LE][len: u64 LE][bits: u8][payload: ceil(len*bits/8) bytes]
//! ```
//!
//! Element `i` occupies payload bits `i*bits .. i*bits+bits-1`, counting from
//! the least significant bit of the first byte. Pad bits in the last byte are
//! zero.

use crate::error::{Error, Result};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;
pub const HEADER_BYTES: usize = 4 + 4 + 8 + 1;

/// Quantized gradient. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    bits: u8,
    min_val: f32,
    max_val: f32,
    len: usize,
    payload: Vec<u8>,
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::config(
            "bits",
            format!("{bits} outside [{MIN_BITS},{MAX_BITS}]"),
        ));
    }
    Ok(())
}

fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

pub fn payload_bytes(len: usize, bits: u8) -> usize {
    (len * bits as usize).div_ceil(8)
}

/// Size on the wire of a `len`-element tensor at `bits`, header included.
pub fn encoded_size_bytes(len: usize, bits: u8) -> usize {
    HEADER_BYTES + payload_bytes(len, bits)
}

/// Packs `codes` (each `< 2^bits`) into a little-endian bit stream.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; payload_bytes(codes.len(), bits)];
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    let mut pos = 0;
    for &c in codes {
        debug_assert!(u32::from(c) <= levels(bits));
        acc |= u32::from(c) << filled;
        filled += u32::from(bits);
        while filled >= 8 {
            out[pos] = acc as u8;
            pos += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out[pos] = acc as u8;
    }
    out
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(payload: &[u8], len: usize, bits: u8) -> Vec<u8> {
    let mask = levels(bits);
    let mut codes = Vec::with_capacity(len);
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    let mut bytes = payload.iter();
    for _ in 0..len {
        while filled < u32::from(bits) {
            acc |= u32::from(*bytes.next().expect("payload shorter than len*bits")) << filled;
            filled += 8;
        }
        codes.push((acc & mask) as u8);
        acc >>= bits;
        filled -= u32::from(bits);
    }
    codes
}

/// Quantizes `values` onto `2^bits` evenly spaced levels spanning `[min, max]`
/// with round-half-to-even.
pub fn quantize(values: &[f32], bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(Error::Dimension("cannot quantize an empty vector".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("element {i} is {}", values[i])));
    }
    let (min_val, max_val) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));

    let top = levels(bits);
    let codes: Vec<u8> = if max_val > min_val {
        let lo = f64::from(min_val);
        let range = f64::from(max_val) - lo;
        let scale = f64::from(top) / range;
        values
            .iter()
            .map(|&v| {
                let c = ((f64::from(v) - lo) * scale).round_ties_even();
                c.clamp(0.0, f64::from(top)) as u8
            })
            .collect()
    } else {
        vec![0; values.len()]
    };

    Ok(QuantizedTensor {
        bits,
        min_val,
        max_val,
        len: values.len(),
        payload: pack_codes(&codes, bits),
    })
}

/// Reconstructs `min + code * (max - min) / (2^bits - 1)` for every element.
pub fn dequantize(qt: &QuantizedTensor) -> Result<Vec<f32>> {
    qt.validate()?;
    if qt.max_val == qt.min_val {
        return Ok(vec![qt.min_val; qt.len]);
    }
    let top = levels(qt.bits);
    let lo = f64::from(qt.min_val);
    let range = f64::from(qt.max_val) - lo;
    Ok(unpack_codes(&qt.payload, qt.len, qt.bits)
        .into_iter()
        .map(|c| {
            let c = u32::from(c);
            if c == top {
                qt.max_val
            } else {
                (lo + range * (f64::from(c) / f64::from(top))) as f32
            }
        })
        .collect())
}

impl QuantizedTensor {
    /// Builds a tensor from raw parts, checking every structural invariant.
    pub fn from_parts(bits: u8, min_val: f32, max_val: f32, len: usize, payload: Vec<u8>) -> Result<Self> {
        let qt = Self {
            bits,
            min_val,
            max_val,
            len,
            payload,
        };
        qt.validate()?;
        Ok(qt)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn min_val(&self) -> f32 {
        self.min_val
    }

    pub fn max_val(&self) -> f32 {
        self.max_val
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn codes(&self) -> Vec<u8> {
        unpack_codes(&self.payload, self.len, self.bits)
    }

    pub fn encoded_size(&self) -> usize {
        encoded_size_bytes(self.len, self.bits)
    }

    fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::Corrupt(format!("bits {} out of range", self.bits)));
        }
        if !(self.min_val.is_finite() && self.max_val.is_finite()) {
            return Err(Error::Corrupt("non-finite range".into()));
        }
        if self.min_val > self.max_val {
            return Err(Error::Corrupt(format!("min {} > max {}", self.min_val, self.max_val)));
        }
        let want = payload_bytes(self.len, self.bits);
        if self.payload.len() != want {
            return Err(Error::Corrupt(format!(
                "payload is {} bytes, {} elements at {} bits need {want}",
                self.payload.len(),
                self.len,
                self.bits
            )));
        }
        let used = (self.len * self.bits as usize) % 8;
        if used != 0 {
            let last = *self.payload.last().unwrap();
            if last >> used != 0 {
                return Err(Error::Corrupt("non-zero pad bits".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_size());
        out.extend_from_slice(&self.min_val.to_le_bytes());
        out.extend_from_slice(&self.max_val.to_le_bytes());
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let min_val = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let max_val = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| Error::Corrupt("len overflows usize".into()))?;
        let bits = bytes[16];
        Self::from_parts(bits, min_val, max_val, len, bytes[HEADER_BYTES..].to_vec())
    }
}
