//! Probable-prime generation for key material.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, ToPrimitive, Zero};
use rand::RngCore;

use super::montgomery::Montgomery;

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
];

const MILLER_RABIN_ROUNDS: usize = 32;

/// Miller–Rabin with random bases, preceded by trial division.
pub fn is_probable_prime<R: RngCore + ?Sized>(candidate: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if candidate < &two {
        return false;
    }
    if candidate == &two {
        return true;
    }
    if !candidate.bit(0) {
        return false;
    }
    for &sp in SMALL_PRIMES.iter() {
        let sp_big = BigUint::from(sp);
        if candidate == &sp_big {
            return true;
        }
        if (candidate % sp).is_zero() {
            return false;
        }
    }
    if candidate.to_u32().is_some_and(|c| c < 257 * 257) {
        // no factor up to 257 and below 257²
        return true;
    }

    let one = BigUint::one();
    let n_minus_1 = candidate - &one;
    let shift = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> shift;
    let ctx = Montgomery::new(candidate).expect("odd candidate above 2");
    let upper = candidate - &two;

    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &upper);
        let mut x = ctx.pow(&a, &d);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..shift {
            x = ctx.mul_mod(&x, &x);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Draws a prime of exactly `bits` bits with the top two bits set, so the
/// product of two such primes has exactly `2·bits` bits.
pub fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 4, "prime size too small");
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn brute_force_prime(n: u32) -> bool {
        n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
    }

    #[test]
    fn agrees_with_trial_division_below_70000() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in 0u32..70_000 {
            assert_eq!(
                is_probable_prime(&BigUint::from(n), &mut rng),
                brute_force_prime(n),
                "n = {n}"
            );
        }
    }

    #[test]
    fn rejects_carmichael_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for c in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265, 321197185] {
            assert!(!is_probable_prime(&BigUint::from(c), &mut rng), "{c}");
        }
    }

    #[test]
    fn random_prime_has_requested_width() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for bits in [8u64, 16, 64, 256] {
            let p = random_prime(bits, &mut rng);
            assert_eq!(p.bits(), bits);
            assert!(p.bit(bits - 2));
        }
    }
}
