//! Fixed-width Montgomery arithmetic over 64-bit limbs.
//!
//! Every exponentiation runs the same square/multiply schedule for a given
//! exponent bit length (fixed 4-bit windows, the multiply is issued even for
//! a zero window and the table entry is selected by a full masked scan).
//! This is best-effort hardening only; no constant-time claim is made for the
//! surrounding bignum conversions.

use num_bigint::BigUint;
use num_traits::{One, Zero};

const WINDOW_BITS: usize = 4;
const TABLE_LEN: usize = 1 << WINDOW_BITS;

/// Precomputed context for arithmetic modulo a fixed odd modulus.
#[derive(Debug, Clone)]
pub struct Montgomery {
    modulus: BigUint,
    limbs: Vec<u64>,
    // -m^{-1} mod 2^64
    m_inv: u64,
    // R^2 mod m, R = 2^(64·s)
    r2: Vec<u64>,
    // R mod m
    one: Vec<u64>,
}

impl Montgomery {
    /// Returns `None` for even moduli or moduli below 3.
    pub fn new(modulus: &BigUint) -> Option<Self> {
        if modulus.is_zero() || !modulus.bit(0) || modulus <= &BigUint::one() {
            return None;
        }
        let limbs = modulus.to_u64_digits();
        let s = limbs.len();

        // Newton iteration doubles the number of correct low bits each step.
        let m0 = limbs[0];
        let mut inv: u64 = 1;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(m0.wrapping_mul(inv)));
        }
        let m_inv = inv.wrapping_neg();

        let r = BigUint::one() << (64 * s);
        let one = to_limbs(&(&r % modulus), s);
        let r2 = to_limbs(&((&r * &r) % modulus), s);

        Some(Self {
            modulus: modulus.clone(),
            limbs,
            m_inv,
            r2,
            one,
        })
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    fn width(&self) -> usize {
        self.limbs.len()
    }

    /// CIOS Montgomery product: `out = a·b·R^{-1} mod m`.
    ///
    /// `a` and `b` must be reduced; `t` is scratch of length `s + 2`.
    fn mul_into(&self, a: &[u64], b: &[u64], out: &mut [u64], t: &mut [u64]) {
        let s = self.width();
        let m = &self.limbs;
        t.fill(0);
        for &bi in b.iter().take(s) {
            let bi = bi as u128;
            let mut carry: u128 = 0;
            for j in 0..s {
                let v = t[j] as u128 + (a[j] as u128) * bi + carry;
                t[j] = v as u64;
                carry = v >> 64;
            }
            let v = t[s] as u128 + carry;
            t[s] = v as u64;
            t[s + 1] = (v >> 64) as u64;

            let q = t[0].wrapping_mul(self.m_inv) as u128;
            let v = t[0] as u128 + q * m[0] as u128;
            let mut carry = v >> 64;
            for j in 1..s {
                let v = t[j] as u128 + q * m[j] as u128 + carry;
                t[j - 1] = v as u64;
                carry = v >> 64;
            }
            let v = t[s] as u128 + carry;
            t[s - 1] = v as u64;
            t[s] = t[s + 1] + (v >> 64) as u64;
        }

        // t < 2m: subtract once and keep whichever is in range.
        let mut borrow = 0u64;
        for j in 0..s {
            let (d1, b1) = t[j].overflowing_sub(m[j]);
            let (d2, b2) = d1.overflowing_sub(borrow);
            out[j] = d2;
            borrow = (b1 | b2) as u64;
        }
        let (_, underflow) = t[s].overflowing_sub(borrow);
        let keep_t = 0u64.wrapping_sub(underflow as u64);
        for j in 0..s {
            out[j] = (t[j] & keep_t) | (out[j] & !keep_t);
        }
    }

    /// `a·b mod m` for already reduced operands.
    pub fn mul_mod(&self, a: &BigUint, b: &BigUint) -> BigUint {
        let s = self.width();
        let mut t = vec![0u64; s + 2];
        let mut am = vec![0u64; s];
        let mut prod = vec![0u64; s];
        self.mul_into(&to_limbs(&(a % &self.modulus), s), &self.r2, &mut am, &mut t);
        self.mul_into(&am, &to_limbs(&(b % &self.modulus), s), &mut prod, &mut t);
        from_limbs(&prod)
    }

    /// `base^exp mod m`.
    pub fn pow(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        let s = self.width();
        let mut t = vec![0u64; s + 2];
        let mut scratch = vec![0u64; s];

        let base = to_limbs(&(base % &self.modulus), s);
        let mut table = vec![0u64; TABLE_LEN * s];
        table[..s].copy_from_slice(&self.one);
        self.mul_into(&base, &self.r2, &mut table[s..2 * s], &mut t);
        for i in 2..TABLE_LEN {
            let (done, todo) = table.split_at_mut(i * s);
            self.mul_into(&done[(i - 1) * s..], &done[s..2 * s], &mut todo[..s], &mut t);
        }

        let digits = exp.to_u64_digits();
        let windows = (exp.bits() as usize).div_ceil(WINDOW_BITS);
        let mut acc = self.one.clone();
        let mut selected = vec![0u64; s];
        for w in (0..windows).rev() {
            for _ in 0..WINDOW_BITS {
                self.mul_into(&acc, &acc, &mut scratch, &mut t);
                std::mem::swap(&mut acc, &mut scratch);
            }
            let bit = w * WINDOW_BITS;
            let idx = ((digits[bit / 64] >> (bit % 64)) & (TABLE_LEN as u64 - 1)) as usize;
            select(&table, idx, s, &mut selected);
            self.mul_into(&acc, &selected, &mut scratch, &mut t);
            std::mem::swap(&mut acc, &mut scratch);
        }

        // Leave Montgomery form.
        let mut unit = vec![0u64; s];
        unit[0] = 1;
        self.mul_into(&acc, &unit, &mut scratch, &mut t);
        from_limbs(&scratch)
    }
}

/// Copies `table[idx]` into `out`, touching every entry.
fn select(table: &[u64], idx: usize, s: usize, out: &mut [u64]) {
    out.fill(0);
    for (i, entry) in table.chunks_exact(s).enumerate() {
        let mask = 0u64.wrapping_sub((i == idx) as u64);
        for (o, &e) in out.iter_mut().zip(entry) {
            *o |= e & mask;
        }
    }
}

fn to_limbs(x: &BigUint, s: usize) -> Vec<u64> {
    let mut v = x.to_u64_digits();
    v.resize(s, 0);
    v
}

fn from_limbs(limbs: &[u64]) -> BigUint {
    let mut words = Vec::with_capacity(limbs.len() * 2);
    for &l in limbs {
        words.push(l as u32);
        words.push((l >> 32) as u32);
    }
    BigUint::new(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::RandBigInt;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rejects_even_and_trivial_moduli() {
        assert!(Montgomery::new(&BigUint::from(0u32)).is_none());
        assert!(Montgomery::new(&BigUint::from(1u32)).is_none());
        assert!(Montgomery::new(&BigUint::from(1224u32)).is_none());
        assert!(Montgomery::new(&BigUint::from(1225u32)).is_some());
    }

    #[test]
    fn tiny_modulus_matches_hand_values() {
        let ctx = Montgomery::new(&BigUint::from(1225u32)).unwrap();
        assert_eq!(ctx.pow(&BigUint::from(2u32), &BigUint::from(35u32)), BigUint::from(2u64.pow(35) % 1225));
        assert_eq!(ctx.pow(&BigUint::from(36u32), &BigUint::from(0u32)), BigUint::one());
        assert_eq!(ctx.mul_mod(&BigUint::from(1000u32), &BigUint::from(999u32)), BigUint::from(999_000u32 % 1225));
    }

    #[test]
    fn random_2048_bit_agrees_with_reference_modpow() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..4 {
            let m = rng.gen_biguint(2048) | BigUint::one() | (BigUint::one() << 2047);
            let ctx = Montgomery::new(&m).unwrap();
            let b = rng.gen_biguint_below(&m);
            let e = rng.gen_biguint(1024);
            assert_eq!(ctx.pow(&b, &e), b.modpow(&e, &m));
        }
    }

    proptest! {
        #[test]
        fn pow_agrees_with_reference(
            m in any::<u128>().prop_map(|x| x | 1 | (1u128 << 100)),
            b in any::<u128>(),
            e in any::<u64>(),
            hi in any::<u64>(),
        ) {
            let m = (BigUint::from(m) << 64) | BigUint::from(hi) | BigUint::one();
            let ctx = Montgomery::new(&m).unwrap();
            let b = BigUint::from(b);
            let e = BigUint::from(e);
            prop_assert_eq!(ctx.pow(&b, &e), b.modpow(&e, &m));
        }

        #[test]
        fn mul_agrees_with_reference(m in any::<u64>().prop_map(|x| x | 1 | (1 << 40)), a in any::<u64>(), b in any::<u64>()) {
            let m = BigUint::from(m);
            let ctx = Montgomery::new(&m).unwrap();
            let (a, b) = (BigUint::from(a) % &m, BigUint::from(b) % &m);
            prop_assert_eq!(ctx.mul_mod(&a, &b), (&a * &b) % &m);
        }
    }
}
