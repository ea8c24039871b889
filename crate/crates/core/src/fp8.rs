//! FP8 E4M3 codec.
//!
//! Bit layout is 1 sign, 4 exponent, 3 mantissa with exponent bias 7. This
//! is the "FN" flavor: there are no infinities, and the only NaN patterns
//! are 0x7f/0xff (exponent and mantissa all ones). That frees the rest of
//! the top exponent row for finite values, so the largest magnitude is
//! `(8 + 6) * 2^5 = 448` at code 0x7e. Subnormals step in units of 2^-9.
//!
//! Encoding rounds to nearest with ties to even and saturates anything at
//! or beyond +-448 to the max finite code; it never produces a NaN code.
//! Non-finite inputs are rejected instead of being mapped to NaN so that a
//! corrupted weight fails loudly at quantization time.

use crate::error::{Error, Result};
use std::sync::OnceLock;

/// Largest finite magnitude representable in E4M3.
pub const MAX_FINITE: f64 = 448.0;
/// Smallest positive normal, 2^-6.
pub const MIN_NORMAL: f64 = 0.015625;
/// Smallest positive subnormal, 2^-9.
pub const MIN_SUBNORMAL: f64 = 0.001953125;
/// Code of the largest positive finite value.
pub const MAX_FINITE_CODE: u8 = 0x7e;

/// True for the two NaN bit patterns 0x7f and 0xff.
pub fn is_nan_code(code: u8) -> bool {
    code & 0x7f == 0x7f
}

/// Decodes one E4M3 byte. NaN codes decode to an f64 NaN; everything else
/// is exact, including -0.0 for 0x80.
pub fn decode(code: u8) -> f64 {
    decode_table()[code as usize]
}

/// Encodes a finite f64 to the nearest E4M3 code, ties to even, saturating
/// at +-448. Returns `Error::InvalidValue` for NaN or infinite input.
pub fn encode(value: f64) -> Result<u8> {
    if !value.is_finite() {
        return Err(Error::InvalidValue(format!(
            "cannot encode non-finite value {value} as fp8"
        )));
    }
    let sign = if value.is_sign_negative() { 0x80 } else { 0x00 };
    let mag = value.abs();
    if mag >= MAX_FINITE {
        return Ok(sign | MAX_FINITE_CODE);
    }
    let code = if mag < MIN_NORMAL {
        // Subnormal range: steps of 2^-9. The multiply is a pure exponent
        // shift, so it is exact; rounding to 8 carries into the smallest
        // normal (code 0x08) by construction.
        (mag * 512.0).round_ties_even() as u8
    } else {
        let e = ((mag.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        // mag / 2^(e-3) lies in [8, 16); the scaling is again exact.
        let n = (mag * 2.0f64.powi(3 - e)).round_ties_even() as u8;
        if n == 16 {
            ((e + 8) as u8) << 3
        } else {
            (((e + 7) as u8) << 3) | (n - 8)
        }
    };
    Ok(sign | code)
}

fn decode_table() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0.0f64; 256];
        for (code, slot) in table.iter_mut().enumerate() {
            *slot = decode_bits(code as u8);
        }
        table
    })
}

fn decode_bits(code: u8) -> f64 {
    let exp = ((code >> 3) & 0x0f) as i32;
    let mant = (code & 0x07) as i32;
    if exp == 0x0f && mant == 0x07 {
        return f64::NAN;
    }
    let mag = if exp == 0 {
        mant as f64 * 2.0f64.powi(-9)
    } else {
        (8 + mant) as f64 * 2.0f64.powi(exp - 10)
    };
    if code & 0x80 != 0 {
        -mag
    } else {
        mag
    }
}
