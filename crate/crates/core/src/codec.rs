//! Fixed-point encoding of signed reals as residues modulo `n`.
//!
//! A value is `mantissa · 16^exponent`. Mantissas below `max_int` are
//! positive, mantissas above `n − max_int` encode `mantissa − n`, and the band
//! in between is reserved for overflow detection after homomorphic
//! arithmetic.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

use crate::paillier::{KeyId, PublicKey};

pub const BASE: u32 = 16;
pub const LOG2_BASE: i32 = 4;
/// Exponents below this are rescaled after decryption.
pub const DEFAULT_EXPONENT_FLOOR: i32 = -32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("cannot encode non-finite value")]
    NonFinite,
    #[error("scaled magnitude exceeds max_int")]
    Overflow,
    #[error("mantissa lies in the overflow band")]
    OverflowBand,
    #[error("mantissa is not reduced modulo n")]
    MantissaOutOfRange,
    #[error("operands belong to different keys ({0} vs {1})")]
    KeyMismatch(KeyId, KeyId),
}

pub type Result<T, E = CodecError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedNumber {
    pub mantissa: BigUint,
    pub exponent: i32,
    pub key: KeyId,
}

/// Sign and magnitude of a mantissa under the band convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signed {
    pub negative: bool,
    pub magnitude: BigUint,
}

/// Splits a finite, non-zero `x` into an odd integer `m` and `e2` with `|x| = m·2^e2`.
fn decompose(x: f64) -> (u64, i32) {
    let bits = x.abs().to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (m, e2) = if exp_bits == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_bits - 1075)
    };
    let tz = m.trailing_zeros();
    (m >> tz, e2 + tz as i32)
}

/// Largest non-positive exponent at which `x` is represented exactly.
pub fn natural_exponent(x: f64) -> i32 {
    if x == 0.0 || !x.is_finite() {
        return 0;
    }
    let (_, e2) = decompose(x);
    if e2 >= 0 {
        0
    } else {
        e2.div_euclid(LOG2_BASE)
    }
}

/// `round(|x| · 16^(−exponent))`, rounding half away from zero.
fn scaled_magnitude(x: f64, exponent: i32) -> BigUint {
    if x == 0.0 {
        return BigUint::zero();
    }
    let (m, e2) = decompose(x);
    let shift = e2 as i64 - (LOG2_BASE as i64) * exponent as i64;
    let m = BigUint::from(m);
    if shift >= 0 {
        m << shift as u64
    } else {
        let s = (-shift) as u64;
        (m + (BigUint::one() << (s - 1))) >> s
    }
}

pub fn signed(pk: &PublicKey, mantissa: &BigUint) -> Result<Signed> {
    let n = pk.n();
    let max_int = pk.max_int();
    if mantissa >= n {
        return Err(CodecError::MantissaOutOfRange);
    }
    if mantissa < max_int {
        Ok(Signed {
            negative: false,
            magnitude: mantissa.clone(),
        })
    } else if mantissa > &(n - max_int) {
        Ok(Signed {
            negative: true,
            magnitude: n - mantissa,
        })
    } else {
        Err(CodecError::OverflowBand)
    }
}

/// Inverse of [`signed`]; fails when the magnitude would enter the overflow band.
pub fn from_signed(pk: &PublicKey, negative: bool, magnitude: BigUint) -> Result<BigUint> {
    if &magnitude >= pk.max_int() {
        return Err(CodecError::Overflow);
    }
    if negative && !magnitude.is_zero() {
        Ok(pk.n() - magnitude)
    } else {
        Ok(magnitude)
    }
}

/// `x · 2^e` without intermediate overflow for large magnitudes.
fn ldexp(mut x: f64, mut e: i64) -> f64 {
    while e > 1000 {
        x *= 2f64.powi(1000);
        e -= 1000;
    }
    while e < -1000 {
        x *= 2f64.powi(-1000);
        e += 1000;
    }
    x * 2f64.powi(e as i32)
}

fn magnitude_to_f64(mag: &BigUint, exponent: i32) -> f64 {
    let mut e = LOG2_BASE as i64 * exponent as i64;
    let bits = mag.bits();
    let mag_f = if bits > 960 {
        // keep 128 significant bits so the f64 conversion stays finite
        let drop = bits - 128;
        e += drop as i64;
        (mag >> drop).to_f64().unwrap_or(f64::INFINITY)
    } else {
        mag.to_f64().unwrap_or(f64::INFINITY)
    };
    ldexp(mag_f, e)
}

/// Encoder/decoder with a configurable exponent floor.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointCodec {
    pub exponent_floor: i32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        Self {
            exponent_floor: DEFAULT_EXPONENT_FLOOR,
        }
    }
}

impl FixedPointCodec {
    pub fn encode(&self, pk: &PublicKey, x: f64, target_exponent: Option<i32>) -> Result<EncodedNumber> {
        if !x.is_finite() {
            return Err(CodecError::NonFinite);
        }
        let exponent = target_exponent.unwrap_or_else(|| natural_exponent(x));
        let magnitude = scaled_magnitude(x, exponent);
        let mantissa = from_signed(pk, x.is_sign_negative(), magnitude)?;
        Ok(EncodedNumber {
            mantissa,
            exponent,
            key: pk.id(),
        })
    }

    pub fn decode(&self, pk: &PublicKey, e: &EncodedNumber) -> Result<f64> {
        if e.key != pk.id() {
            return Err(CodecError::KeyMismatch(e.key, pk.id()));
        }
        let Signed { negative, mut magnitude } = signed(pk, &e.mantissa)?;
        let mut exponent = e.exponent;
        if exponent < self.exponent_floor {
            // rescale onto the floor grid, rounding half away from zero
            let shift = (LOG2_BASE * (self.exponent_floor - exponent)) as u64;
            magnitude = (magnitude + (BigUint::one() << (shift - 1))) >> shift;
            exponent = self.exponent_floor;
        }
        let v = magnitude_to_f64(&magnitude, exponent);
        Ok(if negative { -v } else { v })
    }
}

pub fn encode(pk: &PublicKey, x: f64, target_exponent: Option<i32>) -> Result<EncodedNumber> {
    FixedPointCodec::default().encode(pk, x, target_exponent)
}

pub fn decode(pk: &PublicKey, e: &EncodedNumber) -> Result<f64> {
    FixedPointCodec::default().decode(pk, e)
}

/// Multiplies a mantissa by `16^steps` modulo `n`, checking the result stays
/// outside the overflow band.
pub fn rescale_mantissa(pk: &PublicKey, mantissa: &BigUint, steps: u32) -> Result<BigUint> {
    let s = signed(pk, mantissa)?;
    let magnitude = s.magnitude << (LOG2_BASE as u64 * steps as u64);
    from_signed(pk, s.negative, magnitude)
}

/// Brings both operands to the smaller exponent without changing their values.
pub fn align(pk: &PublicKey, a: &EncodedNumber, b: &EncodedNumber) -> Result<(EncodedNumber, EncodedNumber)> {
    if a.key != b.key {
        return Err(CodecError::KeyMismatch(a.key, b.key));
    }
    let target = a.exponent.min(b.exponent);
    let lower = |e: &EncodedNumber| -> Result<EncodedNumber> {
        let steps = (e.exponent - target) as u32;
        Ok(EncodedNumber {
            mantissa: if steps == 0 {
                e.mantissa.clone()
            } else {
                rescale_mantissa(pk, &e.mantissa, steps)?
            },
            exponent: target,
            key: e.key,
        })
    };
    Ok((lower(a)?, lower(b)?))
}

/// Plaintext product on the grid: mantissas multiply modulo `n`, exponents add.
pub fn mul_encoded(pk: &PublicKey, a: &EncodedNumber, b: &EncodedNumber) -> Result<EncodedNumber> {
    if a.key != b.key {
        return Err(CodecError::KeyMismatch(a.key, b.key));
    }
    let sa = signed(pk, &a.mantissa)?;
    let sb = signed(pk, &b.mantissa)?;
    let mantissa = from_signed(pk, sa.negative != sb.negative, sa.magnitude * sb.magnitude)?;
    Ok(EncodedNumber {
        mantissa,
        exponent: a.exponent + b.exponent,
        key: a.key,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::{keygen, seeded_rng, KeyPair};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn tiny() -> PublicKey {
        KeyPair::from_primes(BigUint::from(5u32), BigUint::from(7u32)).unwrap().public
    }

    fn key256() -> &'static PublicKey {
        static KEY: OnceLock<PublicKey> = OnceLock::new();
        KEY.get_or_init(|| keygen(256, &mut seeded_rng(99)).unwrap().public)
    }

    fn enc(pk: &PublicKey, mantissa: u32, exponent: i32) -> EncodedNumber {
        EncodedNumber {
            mantissa: BigUint::from(mantissa),
            exponent,
            key: pk.id(),
        }
    }

    #[test]
    fn zero_encodes_to_zero() {
        let pk = tiny();
        let e = encode(&pk, 0.0, None).unwrap();
        assert_eq!(e.mantissa, BigUint::zero());
        assert_eq!(e.exponent, 0);
        assert_eq!(decode(&pk, &enc(&pk, 0, -5)).unwrap(), 0.0);
    }

    #[test]
    fn half_is_eight_sixteenths() {
        let pk = tiny();
        let e = encode(&pk, 0.5, None).unwrap();
        assert_eq!((e.mantissa.clone(), e.exponent), (BigUint::from(8u32), -1));
        // direct evaluation of 8·16⁻¹
        assert_eq!(8.0 * 16f64.powi(-1), 0.5);
        assert_eq!(decode(&pk, &e).unwrap(), 0.5);
        assert_eq!(decode(&pk, &enc(&pk, 35 - 8, -1)).unwrap(), -0.5);
    }

    #[test]
    fn negation_is_n_complement() {
        let pk = key256();
        for x in [0.5, 3.25, 1e-3, 12345.0625, 7.0] {
            let p = encode(pk, x, None).unwrap();
            let n = encode(pk, -x, None).unwrap();
            assert_eq!(n.exponent, p.exponent);
            assert_eq!(n.mantissa, pk.n() - &p.mantissa);
        }
    }

    #[test]
    fn pi_round_trips() {
        let pk = key256();
        assert_eq!(decode(pk, &encode(pk, 12.34567, None).unwrap()).unwrap(), 12.34567);
        let fixed = encode(pk, 12.34567, Some(-4)).unwrap();
        assert!((decode(pk, &fixed).unwrap() - 12.34567).abs() <= 16f64.powi(-4));
    }

    #[test]
    fn errors() {
        let pk = tiny();
        assert_eq!(encode(&pk, f64::NAN, None), Err(CodecError::NonFinite));
        assert_eq!(encode(&pk, f64::INFINITY, None), Err(CodecError::NonFinite));
        assert_eq!(encode(&pk, 11.0, None), Err(CodecError::Overflow));
        assert_eq!(encode(&pk, 1.0, Some(-1)), Err(CodecError::Overflow));
        assert_eq!(decode(&pk, &enc(&pk, 11, 0)), Err(CodecError::OverflowBand));
        assert_eq!(decode(&pk, &enc(&pk, 24, 0)), Err(CodecError::OverflowBand));
        assert_eq!(decode(&pk, &enc(&pk, 35, 0)), Err(CodecError::MantissaOutOfRange));
        assert_eq!(decode(&pk, &enc(&pk, 25, 0)).unwrap(), -10.0);
    }

    #[test]
    fn target_exponent_is_honoured() {
        let pk = key256();
        let e = encode(pk, 0.5, Some(-8)).unwrap();
        assert_eq!(e.exponent, -8);
        assert_eq!(e.mantissa, BigUint::from(1u64 << 31));
        let rounded = encode(pk, 0.7, Some(0)).unwrap();
        assert_eq!(rounded.mantissa, BigUint::one());
    }

    #[test]
    fn align_examples() {
        let pk = tiny();
        let a = enc(&pk, 8, -1);
        let (x, y) = align(&pk, &a, &a).unwrap();
        assert_eq!((x, y), (a.clone(), a.clone()));

        let big = key256();
        let a = enc(big, 8, -1);
        let one = enc(big, 1, 0);
        let (x, y) = align(big, &one, &a).unwrap();
        // 1·16⁰ = 16·16⁻¹
        assert_eq!(1.0, 16.0 * 16f64.powi(-1));
        assert_eq!((x.mantissa.clone(), x.exponent), (BigUint::from(16u32), -1));
        assert_eq!(y, a);
        let a = enc(&pk, 8, -1);
        assert!(align(&pk, &enc(&pk, 1, 0), &a).is_err(), "16 exceeds max_int of the tiny key");
    }

    #[test]
    fn exponent_floor_rescales_after_decryption() {
        let pk = key256();
        let codec = FixedPointCodec { exponent_floor: -2 };
        // 0x1234 · 16⁻⁴ = 0.0711..; rescaled to 0x12 · 16⁻²
        let e = EncodedNumber {
            mantissa: BigUint::from(0x1234u32),
            exponent: -4,
            key: pk.id(),
        };
        assert_eq!(codec.decode(pk, &e).unwrap(), 0x12 as f64 / 256.0);
        assert_eq!(decode(pk, &e).unwrap(), 0x1234 as f64 / 65536.0);
    }

    #[test]
    fn product_adds_exponents() {
        let pk = key256();
        let a = encode(pk, -1.5, None).unwrap();
        let b = encode(pk, 0.25, None).unwrap();
        let p = mul_encoded(pk, &a, &b).unwrap();
        assert_eq!(p.exponent, a.exponent + b.exponent);
        assert_eq!(decode(pk, &p).unwrap(), -0.375);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_at_natural_exponent(x in -1e12f64..1e12) {
            let pk = key256();
            prop_assert_eq!(decode(pk, &encode(pk, x, None).unwrap()).unwrap(), x);
        }

        #[test]
        fn round_trip_within_one_unit(x in -1e6f64..1e6, exp in -12i32..2) {
            let pk = key256();
            let e = encode(pk, x, Some(exp)).unwrap();
            prop_assert_eq!(e.exponent, exp);
            let back = decode(pk, &e).unwrap();
            prop_assert!((back - x).abs() <= 16f64.powi(exp));
        }

        #[test]
        fn align_preserves_values(x in -1e3f64..1e3, y in -1e3f64..1e3, ex in -10i32..0, ey in -10i32..0) {
            let pk = key256();
            let a = encode(pk, x, Some(ex)).unwrap();
            let b = encode(pk, y, Some(ey)).unwrap();
            let (a2, b2) = align(pk, &a, &b).unwrap();
            prop_assert_eq!(a2.exponent, ex.min(ey));
            prop_assert_eq!(b2.exponent, ex.min(ey));
            prop_assert_eq!(decode(pk, &a2).unwrap(), decode(pk, &a).unwrap());
            prop_assert_eq!(decode(pk, &b2).unwrap(), decode(pk, &b).unwrap());
        }
    }
}
