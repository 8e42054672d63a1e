//! Paillier cryptosystem with `g = n + 1`.
//!
//! Encryption is `E(m) = g^m · r^n mod n²`, which for this generator reduces
//! to `(1 + m·n) · r^n mod n²`. Ciphertext multiplication adds plaintexts and
//! exponentiation by a plaintext scalar multiplies them, both modulo `n`.

mod keyfile;
pub mod montgomery;
pub mod prime;

use std::fmt;
use std::sync::Arc;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub use keyfile::{KeyFile, LoadedKey, KEY_FILE_VERSION};
use montgomery::Montgomery;

/// Smallest modulus accepted outside of explicitly unsafe mode.
pub const MIN_PRODUCTION_BITS: u32 = 1024;
/// Smallest modulus `keygen` will produce at all.
pub const MIN_KEY_BITS: u32 = 16;

#[derive(Debug, Error)]
pub enum PaillierError {
    #[error("key size {0} bits is below the minimum of {MIN_KEY_BITS}")]
    KeyTooSmall(u32),
    #[error("key size must be even, got {0}")]
    OddKeySize(u32),
    #[error("key size {0} bits is below {MIN_PRODUCTION_BITS}; pass the unsafe flag to allow it")]
    InsecureKeySize(u32),
    #[error("invalid prime factors: {0}")]
    InvalidPrimes(&'static str),
    #[error("plaintext must lie in [0, n)")]
    PlaintextOutOfRange,
    #[error("randomness must lie in (0, n) and be coprime to n")]
    InvalidNonce,
    #[error("ciphertext must lie in [0, n²)")]
    CiphertextOutOfRange,
    #[error("scalar must lie in [0, n)")]
    ScalarOutOfRange,
    #[error("malformed key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PaillierError> = std::result::Result<T, E>;

/// Identity of a public key, used to check that batch operands belong together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyId {
    pub fingerprint: u64,
    pub key_bits: u32,
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}/{}", self.fingerprint, self.key_bits)
    }
}

fn fingerprint(n: &BigUint) -> u64 {
    // FNV-1a over the little-endian bytes of n
    n.to_bytes_le().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    key_bits: u32,
    max_int: BigUint,
    id: KeyId,
    ctx: Arc<Montgomery>,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("key_bits", &self.key_bits)
            .field("id", &self.id)
            .finish_non_exhaustive()
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
    }
}

impl Eq for PublicKey {}

impl PublicKey {
    /// Builds the public half from a modulus. `n` must be odd and at least 15.
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n < BigUint::from(15u32) || !n.bit(0) {
            return Err(PaillierError::InvalidPrimes("modulus must be an odd composite >= 15"));
        }
        let n_squared = &n * &n;
        let ctx = Montgomery::new(&n_squared).expect("n² of an odd n is odd");
        let key_bits = n.bits() as u32;
        Ok(Self {
            g: &n + 1u32,
            max_int: &n / 3u32,
            id: KeyId {
                fingerprint: fingerprint(&n),
                key_bits,
            },
            n,
            n_squared,
            key_bits,
            ctx: Arc::new(ctx),
        })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    /// Largest magnitude the fixed-point codec may place in a mantissa.
    pub fn max_int(&self) -> &BigUint {
        &self.max_int
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    /// Bytes needed to hold one ciphertext word, `ceil(2·key_bits / 8)`.
    pub fn ciphertext_word_bytes(&self) -> usize {
        ciphertext_word_bytes(self.key_bits)
    }

    pub(crate) fn pow_mod_n2(&self, base: &BigUint, exp: &BigUint) -> BigUint {
        self.ctx.pow(base, exp)
    }

    pub(crate) fn mul_mod_n2(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.n_squared
    }

    /// Uniform `r` in `(0, n)` with `gcd(r, n) = 1`.
    pub fn random_nonce<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }
}

pub fn ciphertext_word_bytes(key_bits: u32) -> usize {
    (2 * key_bits as usize).div_ceil(8)
}

/// CRT decryption constants for the factors `p` and `q`.
#[derive(Debug, Clone)]
struct CrtParams {
    p_squared: Arc<Montgomery>,
    q_squared: Arc<Montgomery>,
    hp: BigUint,
    hq: BigUint,
    q_inv_mod_p: BigUint,
}

#[derive(Clone)]
pub struct PrivateKey {
    public: PublicKey,
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
    crt: CrtParams,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl PrivateKey {
    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

impl KeyPair {
    /// Builds a key pair from explicit primes, bypassing size policy.
    ///
    /// Intended for deterministic tiny-key tests such as `p = 5, q = 7`.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        if p == q {
            return Err(PaillierError::InvalidPrimes("p and q must differ"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        if !prime::is_probable_prime(&p, &mut rng) || !prime::is_probable_prime(&q, &mut rng) {
            return Err(PaillierError::InvalidPrimes("factors must be prime"));
        }
        if !p.bit(0) || !q.bit(0) {
            return Err(PaillierError::InvalidPrimes("factors must be odd"));
        }
        let n = &p * &q;
        let one = BigUint::one();
        let p1 = &p - &one;
        let q1 = &q - &one;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(PaillierError::InvalidPrimes("gcd(n, φ(n)) must be 1"));
        }
        let lambda = p1.lcm(&q1);
        let public = PublicKey::from_modulus(n)?;

        // mu = L(g^λ mod n²)^{-1} mod n
        let u = public.pow_mod_n2(public.g(), &lambda);
        let l = l_function(&u, public.n());
        let mu = mod_inverse(&l, public.n()).ok_or(PaillierError::InvalidPrimes("L(g^λ) not invertible"))?;

        let p_squared = Montgomery::new(&(&p * &p)).expect("odd p");
        let q_squared = Montgomery::new(&(&q * &q)).expect("odd q");
        let hp = crt_h(&p_squared, public.g(), &p, &p1)?;
        let hq = crt_h(&q_squared, public.g(), &q, &q1)?;
        let q_inv_mod_p = mod_inverse(&(&q % &p), &p).ok_or(PaillierError::InvalidPrimes("q not invertible mod p"))?;

        let private = PrivateKey {
            public: public.clone(),
            p,
            q,
            lambda,
            mu,
            crt: CrtParams {
                p_squared: Arc::new(p_squared),
                q_squared: Arc::new(q_squared),
                hp,
                hq,
                q_inv_mod_p,
            },
        };
        Ok(Self { public, private })
    }
}

fn crt_h(ctx: &Montgomery, g: &BigUint, prime: &BigUint, prime_minus_1: &BigUint) -> Result<BigUint> {
    let u = ctx.pow(g, prime_minus_1);
    let l = l_function(&u, prime) % prime;
    mod_inverse(&l, prime).ok_or(PaillierError::InvalidPrimes("CRT constant not invertible"))
}

/// `L(u) = (u − 1) / d`.
fn l_function(u: &BigUint, d: &BigUint) -> BigUint {
    (u - 1u32) / d
}

pub(crate) fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    use num_bigint::BigInt;
    let a = BigInt::from(a.clone());
    let m_int = BigInt::from(m.clone());
    let e = a.extended_gcd(&m_int);
    if !e.gcd.is_one() {
        return None;
    }
    e.x.mod_floor(&m_int).to_biguint()
}

/// Rejects key sizes below the production minimum unless `allow_unsafe` is set.
pub fn check_key_policy(bits: u32, allow_unsafe: bool) -> Result<()> {
    if bits < MIN_PRODUCTION_BITS && !allow_unsafe {
        return Err(PaillierError::InsecureKeySize(bits));
    }
    Ok(())
}

/// Generates a key pair whose modulus has exactly `bits` bits.
pub fn keygen<R: RngCore + ?Sized>(bits: u32, rng: &mut R) -> Result<KeyPair> {
    if bits < MIN_KEY_BITS {
        return Err(PaillierError::KeyTooSmall(bits));
    }
    if !bits.is_multiple_of(2) {
        return Err(PaillierError::OddKeySize(bits));
    }
    let half = (bits / 2) as u64;
    loop {
        let p = prime::random_prime(half, rng);
        let q = prime::random_prime(half, rng);
        if p == q || (&p * &q).bits() != bits as u64 {
            continue;
        }
        match KeyPair::from_primes(p, q) {
            Ok(kp) => return Ok(kp),
            Err(PaillierError::InvalidPrimes(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Deterministic generator for tests and reproducible runs.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Generator seeded from the operating system.
pub fn secure_rng() -> ChaCha20Rng {
    ChaCha20Rng::from_entropy()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCiphertext {
    pub value: BigUint,
    /// Whether a random `r^n` factor has been applied.
    pub obfuscated: bool,
}

impl RawCiphertext {
    pub fn new(value: BigUint, obfuscated: bool) -> Self {
        Self { value, obfuscated }
    }
}

/// `(1 + m·n) · r^n mod n²`.
pub fn encrypt_raw(pk: &PublicKey, m: &BigUint, r: &BigUint) -> Result<RawCiphertext> {
    if m >= pk.n() {
        return Err(PaillierError::PlaintextOutOfRange);
    }
    if r.is_zero() || r >= pk.n() || !r.gcd(pk.n()).is_one() {
        return Err(PaillierError::InvalidNonce);
    }
    let gm = g_pow(pk, m);
    let rn = pk.pow_mod_n2(r, pk.n());
    Ok(RawCiphertext::new(pk.mul_mod_n2(&gm, &rn), true))
}

/// Encryption with a fresh nonce drawn from `rng`.
pub fn encrypt<R: RngCore + ?Sized>(pk: &PublicKey, m: &BigUint, rng: &mut R) -> Result<RawCiphertext> {
    let r = pk.random_nonce(rng);
    encrypt_raw(pk, m, &r)
}

/// `g^m mod n²` without a random factor. Only safe as an operand that is
/// combined with an obfuscated ciphertext.
pub fn encrypt_unobfuscated(pk: &PublicKey, m: &BigUint) -> Result<RawCiphertext> {
    if m >= pk.n() {
        return Err(PaillierError::PlaintextOutOfRange);
    }
    Ok(RawCiphertext::new(g_pow(pk, m), false))
}

fn g_pow(pk: &PublicKey, m: &BigUint) -> BigUint {
    (BigUint::one() + m * pk.n()) % pk.n_squared()
}

/// CRT decryption; output equals [`decrypt_raw_reference`] for every input.
pub fn decrypt_raw(sk: &PrivateKey, c: &RawCiphertext) -> Result<BigUint> {
    let pk = &sk.public;
    if &c.value >= pk.n_squared() {
        return Err(PaillierError::CiphertextOutOfRange);
    }
    let crt = &sk.crt;
    let one = BigUint::one();
    let mp = {
        let u = crt.p_squared.pow(&c.value, &(&sk.p - &one));
        (l_function(&u, &sk.p) * &crt.hp) % &sk.p
    };
    let mq = {
        let u = crt.q_squared.pow(&c.value, &(&sk.q - &one));
        (l_function(&u, &sk.q) * &crt.hq) % &sk.q
    };
    // m = mq + q·((mp − mq)·q⁻¹ mod p)
    let diff = (&mp + &sk.p - (&mq % &sk.p)) % &sk.p;
    let h = (diff * &crt.q_inv_mod_p) % &sk.p;
    Ok(mq + h * &sk.q)
}

/// Textbook decryption `L(c^λ mod n²)·μ mod n`.
pub fn decrypt_raw_reference(sk: &PrivateKey, c: &RawCiphertext) -> Result<BigUint> {
    let pk = &sk.public;
    if &c.value >= pk.n_squared() {
        return Err(PaillierError::CiphertextOutOfRange);
    }
    let u = pk.pow_mod_n2(&c.value, &sk.lambda);
    Ok((l_function(&u, pk.n()) * &sk.mu) % pk.n())
}

/// `E(a)·E(b) mod n²`, decrypting to `(a + b) mod n`.
pub fn hadd_raw(pk: &PublicKey, a: &RawCiphertext, b: &RawCiphertext) -> Result<RawCiphertext> {
    if &a.value >= pk.n_squared() || &b.value >= pk.n_squared() {
        return Err(PaillierError::CiphertextOutOfRange);
    }
    Ok(RawCiphertext::new(
        pk.mul_mod_n2(&a.value, &b.value),
        a.obfuscated || b.obfuscated,
    ))
}

/// `E(a)^k mod n²`, decrypting to `(a·k) mod n`.
pub fn hmul_raw(pk: &PublicKey, a: &RawCiphertext, k: &BigUint) -> Result<RawCiphertext> {
    if k >= pk.n() {
        return Err(PaillierError::ScalarOutOfRange);
    }
    if &a.value >= pk.n_squared() {
        return Err(PaillierError::CiphertextOutOfRange);
    }
    Ok(RawCiphertext::new(pk.pow_mod_n2(&a.value, k), a.obfuscated))
}

/// Multiplies in a fresh `r^n`, leaving the plaintext unchanged.
pub fn obfuscate<R: RngCore + ?Sized>(pk: &PublicKey, a: &RawCiphertext, rng: &mut R) -> Result<RawCiphertext> {
    if &a.value >= pk.n_squared() {
        return Err(PaillierError::CiphertextOutOfRange);
    }
    let r = pk.random_nonce(rng);
    let rn = pk.pow_mod_n2(&r, pk.n());
    Ok(RawCiphertext::new(pk.mul_mod_n2(&a.value, &rn), true))
}
