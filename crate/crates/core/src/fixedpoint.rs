//! Q15.16 storage codec.
//!
//! Parameters are held in floating point and only pass through this
//! representation when faults are injected: encode, toggle bits in the
//! 32-bit word, decode. Bit 31 is the two's-complement sign, bits 30..16
//! the integer part and bits 15..0 the fraction.

use std::fmt;

use crate::error::{Error, Result};

/// Number of fractional bits.
pub const FRAC_BITS: u32 = 16;

/// Width of a stored parameter word.
pub const WORD_BITS: u32 = 32;

const SCALE: f64 = (1u64 << FRAC_BITS) as f64;

/// Smallest representable value, `-32768.0`.
pub const MIN_VALUE: f64 = i32::MIN as f64 / SCALE;

/// Largest representable value, `32768 - 2^-16`.
pub const MAX_VALUE: f64 = i32::MAX as f64 / SCALE;

/// One resolution step, `2^-16`.
pub const EPSILON: f64 = 1.0 / SCALE;

/// A 32-bit two's-complement Q15.16 word.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FixedCode(pub u32);

impl FixedCode {
    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn encode(x: f64) -> Result<Self> {
        encode_q15_16(x)
    }

    pub fn decode(self) -> f64 {
        decode_q15_16(self)
    }

    pub fn flip(self, bit: u32) -> Result<Self> {
        flip_bit(self, bit)
    }
}

impl fmt::Debug for FixedCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FixedCode({:#010x} = {})", self.0, self.decode())
    }
}

impl fmt::LowerHex for FixedCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

/// Encodes `x` with round-half-to-even, saturating outside the range.
pub fn encode_q15_16(x: f64) -> Result<FixedCode> {
    if !x.is_finite() {
        return Err(Error::InvalidValue(format!("cannot encode non-finite {x}")));
    }
    // x * 2^16 is exact in binary floating point.
    let scaled = (x * SCALE).round_ties_even();
    let word = if scaled >= i32::MAX as f64 {
        i32::MAX
    } else if scaled <= i32::MIN as f64 {
        i32::MIN
    } else {
        scaled as i32
    };
    Ok(FixedCode(word as u32))
}

pub fn decode_q15_16(code: FixedCode) -> f64 {
    code.0 as i32 as f64 / SCALE
}

pub fn flip_bit(code: FixedCode, bit: u32) -> Result<FixedCode> {
    if bit >= WORD_BITS {
        return Err(Error::Index {
            index: bit as usize,
            len: WORD_BITS as usize,
        });
    }
    Ok(FixedCode(code.0 ^ (1u32 << bit)))
}
