//! Fixed-point affine binarization of parameter vectors.
//!
//! A vector `v` with range `[v_min, v_max]` is mapped to `b`-bit codes
//! `q_j = round((v_j - v_min) / step)` with `step = (v_max - v_min) / (2^b - 1)`
//! (round half away from zero). The bitstream is parameter-major with the most
//! significant bit of each code first, so bit position `j * b + i` holds bit
//! `b - 1 - i` of code `q_j`. Every `d * b` bit string decodes.
//!
//! The range metadata travels alongside the bits and is never corrupted by the
//! channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// Bits per parameter, `2..=64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QuantSpec {
    bits: u8,
}

impl QuantSpec {
    pub const DEFAULT_BITS: u8 = 32;

    pub fn new(bits: u8) -> Result<Self> {
        if (2..=64).contains(&bits) {
            Ok(Self { bits })
        } else {
            Err(Error::Config(format!(
                "bits per parameter must lie in [2, 64], got {bits}"
            )))
        }
    }

    pub fn bits(self) -> u32 {
        u32::from(self.bits)
    }

    /// Largest code, `2^b - 1`.
    pub fn max_code(self) -> u64 {
        u64::MAX >> (64 - self.bits())
    }

    /// `(v_max - v_min) / (2^b - 1)`.
    pub fn step(self, v_min: f64, v_max: f64) -> f64 {
        (v_max - v_min) / self.max_code() as f64
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            bits: Self::DEFAULT_BITS,
        }
    }
}

impl TryFrom<u8> for QuantSpec {
    type Error = Error;
    fn try_from(bits: u8) -> Result<Self> {
        Self::new(bits)
    }
}

impl From<QuantSpec> for u8 {
    fn from(q: QuantSpec) -> u8 {
        q.bits
    }
}

/// `(v_min, v_max, v_max - v_min)`.
pub fn compute_range(v: &[f64]) -> Result<(f64, f64, f64)> {
    if v.is_empty() {
        return Err(Error::Contract("range of an empty vector".into()));
    }
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    Ok((lo, hi, hi - lo))
}

/// `max - min` of a vector; 0 for an empty one.
pub fn range_of(v: &[f64]) -> f64 {
    compute_range(v).map_or(0.0, |r| r.2)
}

/// Binarized vector plus the affine metadata needed to decode it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedPayload {
    codes: Vec<u64>,
    v_min_bits: u64,
    v_max_bits: u64,
    quant: QuantSpec,
}

impl EncodedPayload {
    /// Builds a payload from raw codes. Codes wider than `b` bits are rejected.
    pub fn from_codes(codes: Vec<u64>, v_min: f64, v_max: f64, quant: QuantSpec) -> Result<Self> {
        if !(v_min <= v_max) {
            return Err(Error::Format(format!(
                "payload range is inverted or NaN: [{v_min}, {v_max}]"
            )));
        }
        if let Some(c) = codes.iter().find(|&&c| c > quant.max_code()) {
            return Err(Error::Format(format!(
                "code {c} does not fit in {} bits",
                quant.bits()
            )));
        }
        Ok(Self {
            codes,
            v_min_bits: v_min.to_bits(),
            v_max_bits: v_max.to_bits(),
            quant,
        })
    }

    /// Builds a payload from a `d * b` bit sequence (MSB first per parameter).
    pub fn from_bits(bits: &[bool], d: usize, v_min: f64, v_max: f64, quant: QuantSpec) -> Result<Self> {
        let b = quant.bits() as usize;
        if bits.len() != d * b {
            return Err(Error::Format(format!(
                "bitstream length {} does not equal d * b = {}",
                bits.len(),
                d * b
            )));
        }
        let codes = bits
            .chunks(b.max(1))
            .map(|chunk| chunk.iter().fold(0u64, |acc, &bit| (acc << 1) | u64::from(bit)))
            .collect();
        Self::from_codes(codes, v_min, v_max, quant)
    }

    pub fn d(&self) -> usize {
        self.codes.len()
    }

    pub fn quant(&self) -> QuantSpec {
        self.quant
    }

    pub fn v_min(&self) -> f64 {
        f64::from_bits(self.v_min_bits)
    }

    pub fn v_max(&self) -> f64 {
        f64::from_bits(self.v_max_bits)
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    /// Total number of payload bits, `d * b`.
    pub fn bit_len(&self) -> usize {
        self.codes.len() * self.quant.bits() as usize
    }

    fn locate(&self, pos: usize) -> (usize, u32) {
        let b = self.quant.bits() as usize;
        (pos / b, (b - 1 - pos % b) as u32)
    }

    pub fn bit(&self, pos: usize) -> bool {
        let (j, k) = self.locate(pos);
        (self.codes[j] >> k) & 1 == 1
    }

    pub fn flip(&mut self, pos: usize) {
        let (j, k) = self.locate(pos);
        self.codes[j] ^= 1 << k;
    }

    /// Complements every payload bit.
    pub fn complement(&mut self) {
        let mask = self.quant.max_code();
        for c in &mut self.codes {
            *c ^= mask;
        }
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.bit_len()).map(move |p| self.bit(p))
    }

    /// Metadata (`d`, `b`, `v_min`, `v_max`) equality.
    pub fn same_metadata(&self, other: &Self) -> bool {
        self.d() == other.d()
            && self.quant == other.quant
            && self.v_min_bits == other.v_min_bits
            && self.v_max_bits == other.v_max_bits
    }

    /// Number of differing payload bits.
    pub fn hamming_distance(&self, other: &Self) -> Result<usize> {
        if self.d() != other.d() || self.quant != other.quant {
            return Err(Error::Contract(format!(
                "payload shapes differ: {}x{} vs {}x{} bits",
                self.d(),
                self.quant.bits(),
                other.d(),
                other.quant.bits()
            )));
        }
        Ok(self
            .codes
            .iter()
            .zip(&other.codes)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum())
    }

    /// Dump format: `d` (u64), `b` (u8), `v_min`, `v_max` (f64), all
    /// big-endian, then the bitstream packed MSB first and zero-padded to a
    /// byte boundary.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + self.bit_len().div_ceil(8));
        out.extend_from_slice(&(self.d() as u64).to_be_bytes());
        out.push(self.quant.bits);
        out.extend_from_slice(&self.v_min_bits.to_be_bytes());
        out.extend_from_slice(&self.v_max_bits.to_be_bytes());
        let mut acc = 0u8;
        let mut filled = 0;
        for bit in self.bits() {
            acc = (acc << 1) | u8::from(bit);
            filled += 1;
            if filled == 8 {
                out.push(acc);
                acc = 0;
                filled = 0;
            }
        }
        if filled > 0 {
            out.push(acc << (8 - filled));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 8 + 1 + 8 + 8;
        if bytes.len() < HEADER {
            return Err(Error::Format(format!(
                "payload dump needs a {HEADER}-byte header, found {} bytes",
                bytes.len()
            )));
        }
        let u64_at = |at: usize| u64::from_be_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let d = usize::try_from(u64_at(0))
            .map_err(|_| Error::Format("payload dimension overflows usize".into()))?;
        let quant = QuantSpec::new(bytes[8]).map_err(|e| Error::Format(e.to_string()))?;
        let v_min = f64::from_bits(u64_at(9));
        let v_max = f64::from_bits(u64_at(17));
        let nbits = d
            .checked_mul(quant.bits() as usize)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let body = &bytes[HEADER..];
        if body.len() != nbits.div_ceil(8) {
            return Err(Error::Format(format!(
                "payload body holds {} bytes, expected {} for {d} x {} bits",
                body.len(),
                nbits.div_ceil(8),
                quant.bits()
            )));
        }
        let bits: Vec<bool> = (0..nbits)
            .map(|p| (body[p / 8] >> (7 - p % 8)) & 1 == 1)
            .collect();
        Self::from_bits(&bits, d, v_min, v_max, quant)
    }
}

fn quantize(x: f64, v_min: f64, step: f64, max_code: u64) -> u64 {
    if step == 0.0 {
        return 0;
    }
    // f64::round rounds half away from zero; the cast saturates.
    (((x - v_min) / step).round() as u64).min(max_code)
}

/// Encodes with the vector's own range.
pub fn encode(v: &[f64], quant: QuantSpec) -> Result<EncodedPayload> {
    let (v_min, v_max, _) = compute_range(v)?;
    encode_with_range(v, v_min, v_max, quant)
}

/// Encodes against an externally supplied range; every entry must lie inside
/// `[v_min, v_max]`.
pub fn encode_with_range(v: &[f64], v_min: f64, v_max: f64, quant: QuantSpec) -> Result<EncodedPayload> {
    if !(v_min.is_finite() && v_max.is_finite() && v_min <= v_max) {
        return Err(Error::Contract(format!("invalid range [{v_min}, {v_max}]")));
    }
    if let Some(x) = v.iter().find(|&&x| !(v_min..=v_max).contains(&x)) {
        return Err(Error::Contract(format!(
            "value {x} outside range [{v_min}, {v_max}]"
        )));
    }
    let step = quant.step(v_min, v_max);
    let max_code = quant.max_code();
    let codes = v.iter().map(|&x| quantize(x, v_min, step, max_code)).collect();
    EncodedPayload::from_codes(codes, v_min, v_max, quant)
}

/// `v_j = v_min + q_j * step`; the top code maps to `v_max` exactly and a
/// zero range decodes to `v_min` everywhere.
pub fn decode(p: &EncodedPayload) -> ParamVector {
    let (v_min, v_max) = (p.v_min(), p.v_max());
    let step = p.quant.step(v_min, v_max);
    let max_code = p.quant.max_code();
    p.codes
        .iter()
        .map(|&q| {
            if step == 0.0 {
                v_min
            } else if q == max_code {
                v_max
            } else {
                v_min + q as f64 * step
            }
        })
        .collect()
}

/// `decode(encode(v))`.
pub fn quantize_vector(v: &[f64], quant: QuantSpec) -> Result<ParamVector> {
    Ok(decode(&encode(v, quant)?))
}
