//! Storage element types and the conversions between them and `f64`.
//!
//! All arithmetic in this crate happens on `f64`. Stored values are widened
//! exactly on read and narrowed with round-to-nearest-even on write.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub const fn size_in_bytes(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    /// Decodes little-endian bytes into `out`. `bytes.len()` must be a multiple
    /// of the element size.
    pub fn decode_into(self, bytes: &[u8], out: &mut Vec<f64>) {
        out.reserve(bytes.len() / self.size_in_bytes());
        match self {
            Dtype::F64 => out.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()))),
            Dtype::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
            ),
            Dtype::F16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16_bits_to_f64(u16::from_le_bytes([c[0], c[1]]))),
            ),
            Dtype::BF16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16_bits_to_f64(u16::from_le_bytes([c[0], c[1]]))),
            ),
        }
    }

    /// Narrows `values` to this dtype and appends the little-endian bytes.
    pub fn encode_into(self, values: &[f64], out: &mut Vec<u8>) {
        out.reserve(values.len() * self.size_in_bytes());
        match self {
            Dtype::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&f64_to_f16_bits(v).to_le_bytes())),
            Dtype::BF16 => values
                .iter()
                .for_each(|&v| out.extend_from_slice(&f64_to_bf16_bits(v).to_le_bytes())),
        }
    }

    /// Round-trips a value through this dtype.
    pub fn narrow(self, value: f64) -> f64 {
        match self {
            Dtype::F64 => value,
            Dtype::F32 => value as f32 as f64,
            Dtype::F16 => f16_bits_to_f64(f64_to_f16_bits(value)),
            Dtype::BF16 => bf16_bits_to_f64(f64_to_bf16_bits(value)),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown dtype {0:?}")]
pub struct UnknownDtype(pub String);

impl FromStr for Dtype {
    type Err = UnknownDtype;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "F64" => Ok(Dtype::F64),
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            _ => Err(UnknownDtype(s.to_string())),
        }
    }
}

pub fn bf16_bits_to_f64(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

pub fn f16_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1F) as i32;
    let man = (bits & 0x3FF) as f64;
    match exp {
        0 => sign * man * 2f64.powi(-24),
        0x1F if man == 0.0 => sign * f64::INFINITY,
        0x1F => f64::NAN.copysign(sign),
        _ => sign * (1024.0 + man) * 2f64.powi(exp - 25),
    }
}

pub fn f64_to_bf16_bits(value: f64) -> u16 {
    round_to_half_width(value, HalfFormat::BF16)
}

pub fn f64_to_f16_bits(value: f64) -> u16 {
    round_to_half_width(value, HalfFormat::F16)
}

#[derive(Clone, Copy)]
struct HalfFormat {
    mantissa_bits: u32,
    min_exponent: i32,
    inf_bits: u16,
    quiet_nan_bits: u16,
}

impl HalfFormat {
    const BF16: HalfFormat = HalfFormat {
        mantissa_bits: 7,
        min_exponent: -126,
        inf_bits: 0x7F80,
        quiet_nan_bits: 0x7FC0,
    };
    const F16: HalfFormat = HalfFormat {
        mantissa_bits: 10,
        min_exponent: -14,
        inf_bits: 0x7C00,
        quiet_nan_bits: 0x7E00,
    };
}

/// Correctly rounded (nearest, ties to even) narrowing from the full 53-bit
/// significand. Works on the integer significand so no precision is dropped
/// before the rounding decision.
fn round_to_half_width(value: f64, fmt: HalfFormat) -> u16 {
    let bits = value.to_bits();
    let sign = ((bits >> 48) as u16) & 0x8000;
    let biased = ((bits >> 52) & 0x7FF) as i32;
    let fraction = bits & ((1u64 << 52) - 1);

    if biased == 0x7FF {
        return sign
            | if fraction == 0 {
                fmt.inf_bits
            } else {
                fmt.quiet_nan_bits
            };
    }
    // f64 subnormals (and zero) are far below half of the smallest target subnormal.
    if biased == 0 {
        return sign;
    }

    let exponent = biased - 1023;
    let significand = fraction | (1u64 << 52);
    let quantum_exp = exponent.max(fmt.min_exponent);
    let shift = (52 - fmt.mantissa_bits as i32 + (quantum_exp - exponent)) as u32;
    if shift >= 54 {
        return sign;
    }

    let mut rounded = significand >> shift;
    let remainder = significand & ((1u64 << shift) - 1);
    let halfway = 1u64 << (shift - 1);
    if remainder > halfway || (remainder == halfway && rounded & 1 == 1) {
        rounded += 1;
    }

    // A carry out of the significand lands in the exponent field on its own.
    let encoded = (((quantum_exp - fmt.min_exponent) as u64) << fmt.mantissa_bits) + rounded;
    if encoded >= fmt.inf_bits as u64 {
        sign | fmt.inf_bits
    } else {
        sign | encoded as u16
    }
}
