//! Deterministic fixed-point encoding of loss values.
//!
//! Loss values cross a trust boundary: a client encodes its locally computed
//! loss, feeds it to a circuit witness, and the server compares an encoded
//! threshold against it inside that circuit. Both sides must therefore map a
//! given `f64` to exactly the same integer on every platform. Encoding is
//! pure integer arithmetic on the float's mantissa/exponent decomposition —
//! no intermediate rounding, no libm calls.

use thiserror::Error;

/// Number of fractional decimal digits preserved by the encoding.
pub const FRACTIONAL_DIGITS: u32 = 6;

/// Multiplier applied to a loss value before rounding to an integer.
pub const SCALE: u32 = 1_000_000;

/// Largest encodable loss value: `(2^32 - 1) / 10^6`.
pub const MAX_ENCODABLE: f64 = (u32::MAX as f64) / (SCALE as f64);

/// A loss value encoded as `round(loss * 10^6)`, stored in 32 bits.
///
/// The raw integer is what circuits compare: `loss < threshold` becomes a
/// strict integer comparison of the two raw values. Construction is only
/// possible through [`encode_fixed`] (or [`FixedLoss::from_raw`], which
/// cannot fail because every `u32` is a valid encoding), so a `FixedLoss`
/// always holds an in-range value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FixedLoss {
    raw: u32,
}

impl FixedLoss {
    /// Wraps an already-encoded raw value.
    pub fn from_raw(raw: u32) -> Self {
        FixedLoss { raw }
    }

    /// The underlying integer `round(loss * 10^6)`.
    pub fn raw(&self) -> u32 {
        self.raw
    }

    /// Decodes back to a float. See [`decode_fixed`].
    pub fn to_f64(&self) -> f64 {
        decode_fixed(*self)
    }
}

/// Rejected inputs: negative, non-finite, or too large to fit 32 bits after
/// scaling.
#[derive(Debug, Error, PartialEq)]
pub enum RangeError {
    #[error("loss {0} is negative; only non-negative losses are encodable")]
    Negative(f64),
    #[error("loss is not finite")]
    NotFinite,
    #[error("loss {0} exceeds the encodable maximum {MAX_ENCODABLE}")]
    TooLarge(f64),
}

/// Encodes a non-negative finite loss as `round(loss * 10^6)` with ties
/// rounding away from zero.
///
/// The computation decomposes the float into an exact integer mantissa `m`
/// and power-of-two exponent `e` (so `loss = m * 2^e` exactly), multiplies by
/// `10^6` in 128-bit integer arithmetic, and applies the binary shift with
/// explicit half-ulp rounding. Every step is exact until the single final
/// rounding, so two machines can never disagree on the result.
pub fn encode_fixed(loss: f64) -> Result<FixedLoss, RangeError> {
    if loss.is_nan() || loss.is_infinite() {
        return Err(RangeError::NotFinite);
    }
    if loss < 0.0 {
        return Err(RangeError::Negative(loss));
    }

    let bits = loss.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    // loss == mantissa * 2^exp, exactly.
    let (mantissa, exp) = if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    if mantissa == 0 {
        return Ok(FixedLoss { raw: 0 });
    }

    // scaled = mantissa * 10^6 < 2^53 * 2^20 = 2^73, comfortably in u128.
    let scaled = mantissa as u128 * SCALE as u128;
    let raw_wide: u128 = if exp >= 0 {
        if exp as u32 >= scaled.leading_zeros() {
            return Err(RangeError::TooLarge(loss));
        }
        scaled << exp
    } else {
        let shift = (-exp) as u32;
        if shift >= 128 {
            // scaled < 2^73, so the quotient and the rounding bit are both 0.
            0
        } else {
            let quotient = scaled >> shift;
            let remainder = scaled - (quotient << shift);
            let half = 1u128 << (shift - 1);
            // Ties round away from zero (values are non-negative: upward).
            if remainder >= half {
                quotient + 1
            } else {
                quotient
            }
        }
    };

    u32::try_from(raw_wide)
        .map(|raw| FixedLoss { raw })
        .map_err(|_| RangeError::TooLarge(loss))
}

/// Decodes a fixed-point loss back to `raw / 10^6`.
///
/// `raw < 2^32` and `f64` has 53 mantissa bits, so `raw` converts exactly;
/// the division introduces at most half an ulp of error.
pub fn decode_fixed(value: FixedLoss) -> f64 {
    value.raw as f64 / SCALE as f64
}
