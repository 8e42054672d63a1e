//! Operator micro-benchmarks.
//!
//! Inputs are generated from a seed before any timing. Each measurement runs
//! `warmups` untimed iterations, then reports the median wall time of `runs`
//! timed ones. Throughput is instances per second, where an instance is one
//! input element, except for `hmatmul`, where it is one output element.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_bigint::BigUint;
use num_traits::One;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::arena::{Arena, ArenaError, Input, Op, Output, TransferLedger};
use crate::batch::{
    batch_decrypt, BatchError, CiphertextBatch, ExecutionBackend, Exponents, PlaintextBatch,
    Shape,
};
use crate::codec::{self, CodecError, EncodedNumber};
use crate::paillier::{keygen, seeded_rng, KeyPair, PaillierError, PublicKey};

/// Inner dimension of the `hmatmul` workload: `[[count × 8]] × (8 × 1)`.
pub const MATMUL_INNER: usize = 8;
/// Elements checked against the plaintext oracle when verifying.
const SPOT_CHECKS: usize = 16;
/// Fixed-point exponent of generated operands.
const OPERAND_EXPONENT: i32 = -8;
/// Precomputed nonce powers behind fixture ciphertexts.
const NONCE_POOL: usize = 64;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown operator {0:?}; expected one of encode, decode, henc, hdec, hmul, hadd, hmatmul, hsum")]
    UnknownOp(String),
    #[error("unknown backend {0:?}; expected naive or parallel")]
    UnknownBackend(String),
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("at least one timed run is required")]
    ZeroRuns,
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchOp {
    Encode,
    Decode,
    Henc,
    Hdec,
    Hmul,
    Hadd,
    Hmatmul,
    Hsum,
}

impl BenchOp {
    pub const ALL: [BenchOp; 8] = [
        BenchOp::Encode,
        BenchOp::Decode,
        BenchOp::Henc,
        BenchOp::Hdec,
        BenchOp::Hmul,
        BenchOp::Hadd,
        BenchOp::Hmatmul,
        BenchOp::Hsum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Encode => "encode",
            BenchOp::Decode => "decode",
            BenchOp::Henc => "henc",
            BenchOp::Hdec => "hdec",
            BenchOp::Hmul => "hmul",
            BenchOp::Hadd => "hadd",
            BenchOp::Hmatmul => "hmatmul",
            BenchOp::Hsum => "hsum",
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchOp {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        BenchOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| BenchError::UnknownOp(s.to_string()))
    }
}

/// `naive`, `parallel` (one worker per core) or `parallel:N`.
pub fn parse_backend(s: &str) -> Result<ExecutionBackend> {
    match s.split_once(':') {
        None if s == "naive" => Ok(ExecutionBackend::Naive),
        None if s == "parallel" => Ok(ExecutionBackend::parallel_auto()),
        Some(("parallel", n)) => match n.parse::<usize>() {
            Ok(w) if w > 0 => Ok(ExecutionBackend::parallel(w)),
            _ => Err(BenchError::UnknownBackend(s.to_string())),
        },
        _ => Err(BenchError::UnknownBackend(s.to_string())),
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub op: BenchOp,
    pub count: usize,
    pub key_bits: u32,
    pub backend: ExecutionBackend,
    pub seed: u64,
    pub verify: bool,
    pub warmups: usize,
    pub runs: usize,
}

impl BenchConfig {
    pub fn new(op: BenchOp, count: usize, key_bits: u32, backend: ExecutionBackend) -> Self {
        Self {
            op,
            count,
            key_bits,
            backend,
            seed: 0,
            verify: false,
            warmups: 3,
            runs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub operator: BenchOp,
    pub backend: String,
    pub workers: usize,
    pub count: usize,
    pub key_bits: u32,
    /// median of the timed runs, seconds
    pub wall_time_s: f64,
    /// `count / wall_time_s`
    pub throughput: f64,
    /// arena traffic of one timed run; zero for operators outside the arena
    pub ledger: TransferLedger,
    /// `None` unless verification was requested
    pub verified: Option<bool>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Seeded operands for one operator.
struct Workload {
    keys: KeyPair,
    values: Vec<f64>,
    a: PlaintextBatch,
    b: PlaintextBatch,
    ca: CiphertextBatch,
    cb: CiphertextBatch,
    /// `hmatmul` operands
    cm: CiphertextBatch,
    x: PlaintextBatch,
    seed: u64,
}

#[derive(Debug, PartialEq)]
enum Outcome {
    Encoded(Vec<EncodedNumber>),
    Values(Vec<f64>),
    Plain(PlaintextBatch),
    Cipher(CiphertextBatch),
}

/// Encrypts benchmark operands under nonces `r_a·r_b` drawn from a pool of
/// precomputed `r^n`, so setup costs two multiplications per element instead
/// of a full exponentiation. The ciphertexts are valid but the nonce space is
/// tiny: fixtures only.
fn fixture_encrypt(pk: &PublicKey, p: &PlaintextBatch, seed: u64) -> Result<CiphertextBatch> {
    let mut rng = seeded_rng(seed);
    let pool: Vec<BigUint> = (0..NONCE_POOL).map(|_| pk.pow_mod_n2(&pk.random_nonce(&mut rng), pk.n())).collect();
    let payload = p
        .mantissas()
        .iter()
        .map(|m| {
            let (a, b) = (rng.gen_range(0..NONCE_POOL), rng.gen_range(0..NONCE_POOL));
            let gm = (BigUint::one() + m * pk.n()) % pk.n_squared();
            pk.mul_mod_n2(&pk.mul_mod_n2(&gm, &pool[a]), &pool[b])
        })
        .collect();
    Ok(CiphertextBatch::new(pk, p.shape(), p.exponents().clone(), payload)?)
}

fn plain_from(pk: &PublicKey, values: &[f64], shape: Shape) -> Result<PlaintextBatch> {
    Ok(PlaintextBatch::encode(pk, values, shape, Some(OPERAND_EXPONENT))?)
}

impl Workload {
    fn new(cfg: &BenchConfig) -> Result<Self> {
        let keys = keygen(cfg.key_bits, &mut seeded_rng(cfg.seed ^ 0x6b65_7967))?;
        let pk = &keys.public;
        let mut rng = seeded_rng(cfg.seed);
        let n = cfg.count;
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // scalar operands are non-negative, as features are after scaling;
        // their exponentiation cost then tracks the fixed-point width
        let scalars: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let needs = |ops: &[BenchOp]| ops.contains(&cfg.op);
        let a = plain_from(pk, &values, Shape::Vector(n))?;
        let b = plain_from(pk, &scalars, Shape::Vector(n))?;
        let enc = |p: &PlaintextBatch, salt: u64| fixture_encrypt(pk, p, cfg.seed ^ salt);
        let empty = || CiphertextBatch::new(pk, Shape::Vector(0), Exponents::Shared(0), Vec::new());
        let ca = if needs(&[BenchOp::Hdec, BenchOp::Hmul, BenchOp::Hadd, BenchOp::Hsum]) { enc(&a, 1)? } else { empty()? };
        let cb = if needs(&[BenchOp::Hadd]) { enc(&b, 2)? } else { empty()? };
        let (cm, x) = if needs(&[BenchOp::Hmatmul]) {
            let left: Vec<f64> = (0..n * MATMUL_INNER).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let right: Vec<f64> = (0..MATMUL_INNER).map(|_| rng.gen_range(0.0..1.0)).collect();
            let left = plain_from(pk, &left, Shape::Matrix { rows: n, cols: MATMUL_INNER })?;
            (enc(&left, 3)?, plain_from(pk, &right, Shape::Matrix { rows: MATMUL_INNER, cols: 1 })?)
        } else {
            (empty()?, plain_from(pk, &[], Shape::Vector(0))?)
        };
        Ok(Self {
            keys,
            values,
            a,
            b,
            ca,
            cb,
            cm,
            x,
            seed: cfg.seed,
        })
    }

    fn execute(&self, op: BenchOp, backend: &ExecutionBackend) -> Result<(Outcome, TransferLedger)> {
        let pk = &self.keys.public;
        let through_arena = |op: Op, inputs: &[Input<'_>]| -> Result<(Outcome, TransferLedger)> {
            let arena = Arena::new(pk.clone(), *backend, u64::MAX);
            let mut rng = seeded_rng(self.seed ^ 0x0072_756e);
            match arena.exec_op(op, inputs, false, &mut rng)? {
                Output::Cipher(c) => Ok((Outcome::Cipher(c), arena.ledger())),
                other => unreachable!("uncached ciphertext op returned {other:?}"),
            }
        };
        let zero = TransferLedger::default();
        match op {
            BenchOp::Encode => {
                let v = backend
                    .try_map(self.values.len(), |i| codec::encode(pk, self.values[i], None))
                    .map_err(|(_, e)| e)?;
                Ok((Outcome::Encoded(v), zero))
            }
            BenchOp::Decode => {
                let v = backend
                    .try_map(self.a.count(), |i| codec::decode(pk, &self.a.element(i)))
                    .map_err(|(_, e)| e)?;
                Ok((Outcome::Values(v), zero))
            }
            BenchOp::Henc => through_arena(Op::Encrypt, &[Input::Plain(&self.a)]),
            BenchOp::Hdec => Ok((Outcome::Plain(batch_decrypt(&self.keys.private, &self.ca, backend)?), zero)),
            BenchOp::Hmul => through_arena(Op::MulPlain, &[Input::Cipher(&self.ca), Input::Plain(&self.b)]),
            BenchOp::Hadd => through_arena(Op::Add, &[Input::Cipher(&self.ca), Input::Cipher(&self.cb)]),
            BenchOp::Hmatmul => through_arena(Op::MatMul, &[Input::Cipher(&self.cm), Input::Plain(&self.x)]),
            BenchOp::Hsum => through_arena(Op::Sum { axis: None }, &[Input::Cipher(&self.ca)]),
        }
    }

    /// Checks the first few elements against plaintext arithmetic mod `n`.
    fn matches_oracle(&self, op: BenchOp, out: &Outcome) -> Result<bool> {
        let pk = &self.keys.public;
        let sk = &self.keys.private;
        let n = pk.n();
        let k = self.values.len().min(SPOT_CHECKS);
        let ma = self.a.mantissas();
        let mb = self.b.mantissas();
        let decrypt_head = |c: &CiphertextBatch| -> Result<Vec<BigUint>> {
            let p = batch_decrypt(sk, c, &ExecutionBackend::Naive)?;
            Ok(p.mantissas().iter().take(k).cloned().collect())
        };
        Ok(match (op, out) {
            (BenchOp::Encode, Outcome::Encoded(v)) => {
                v.iter().zip(&self.values).take(k).all(|(e, &x)| codec::decode(pk, e).is_ok_and(|d| d == x))
            }
            (BenchOp::Decode, Outcome::Values(v)) => v.iter().zip(&self.values).take(k).all(|(d, x)| (d - x).abs() <= 1e-9),
            (BenchOp::Henc, Outcome::Cipher(c)) => decrypt_head(c)? == ma[..k],
            (BenchOp::Hdec, Outcome::Plain(p)) => p.mantissas()[..k] == ma[..k],
            (BenchOp::Hmul, Outcome::Cipher(c)) => {
                decrypt_head(c)? == (0..k).map(|i| (&ma[i] * &mb[i]) % n).collect::<Vec<_>>()
            }
            (BenchOp::Hadd, Outcome::Cipher(c)) => {
                decrypt_head(c)? == (0..k).map(|i| (&ma[i] + &mb[i]) % n).collect::<Vec<_>>()
            }
            (BenchOp::Hmatmul, Outcome::Cipher(c)) => {
                let left = batch_decrypt(sk, &self.cm, &ExecutionBackend::Naive)?;
                let (l, w) = (left.mantissas(), self.x.mantissas());
                let expect: Vec<BigUint> = (0..k)
                    .map(|r| (0..MATMUL_INNER).fold(BigUint::default(), |acc, t| (acc + &l[r * MATMUL_INNER + t] * &w[t]) % n))
                    .collect();
                decrypt_head(c)? == expect
            }
            (BenchOp::Hsum, Outcome::Cipher(c)) => {
                decrypt_head(c)? == vec![ma.iter().fold(BigUint::default(), |acc, m| (acc + m) % n)]
            }
            _ => false,
        })
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

/// Runs one benchmark. With `verify`, the result must equal the naive
/// backend's bit for bit and its leading elements must match plaintext
/// arithmetic.
pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.count == 0 {
        return Err(BenchError::ZeroCount);
    }
    if cfg.runs == 0 {
        return Err(BenchError::ZeroRuns);
    }
    let work = Workload::new(cfg)?;
    for _ in 0..cfg.warmups {
        work.execute(cfg.op, &cfg.backend)?;
    }
    let mut times = Vec::with_capacity(cfg.runs);
    let mut last = None;
    for _ in 0..cfg.runs {
        let start = Instant::now();
        let result = work.execute(cfg.op, &cfg.backend)?;
        times.push(start.elapsed().as_secs_f64());
        last = Some(result);
    }
    let (outcome, ledger) = last.expect("runs > 0");
    let verified = if cfg.verify {
        let (reference, _) = work.execute(cfg.op, &ExecutionBackend::Naive)?;
        Some(reference == outcome && work.matches_oracle(cfg.op, &outcome)?)
    } else {
        None
    };
    // a clock tick is the floor, so a single instance never divides by zero
    let wall = median(times).max(1e-9);
    Ok(BenchReport {
        operator: cfg.op,
        backend: cfg.backend.name().to_string(),
        workers: cfg.backend.workers(),
        count: cfg.count,
        key_bits: cfg.key_bits,
        wall_time_s: wall,
        throughput: cfg.count as f64 / wall,
        ledger,
        verified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(op: BenchOp, count: usize, backend: ExecutionBackend) -> BenchReport {
        let cfg = BenchConfig {
            verify: true,
            warmups: 0,
            runs: 1,
            seed: 4,
            ..BenchConfig::new(op, count, 128, backend)
        };
        run(&cfg).unwrap()
    }

    #[test]
    fn every_operator_verifies_on_both_backends() {
        for op in BenchOp::ALL {
            for backend in [ExecutionBackend::Naive, ExecutionBackend::parallel(3)] {
                let r = quick(op, 7, backend);
                assert_eq!(r.verified, Some(true), "{op} on {}", r.backend);
                assert_eq!(r.count, 7);
                assert!((r.throughput * r.wall_time_s - 7.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_instance_has_finite_throughput() {
        let r = quick(BenchOp::Hadd, 1, ExecutionBackend::Naive);
        assert!(r.throughput.is_finite() && r.throughput > 0.0);
        assert_eq!(r.ledger.uploads.count, 2);
        assert_eq!(r.ledger.downloads.count, 1);
    }

    #[test]
    fn parsing() {
        assert_eq!("hmatmul".parse::<BenchOp>().unwrap(), BenchOp::Hmatmul);
        assert!(matches!("hdiv".parse::<BenchOp>(), Err(BenchError::UnknownOp(_))));
        assert_eq!(parse_backend("naive").unwrap(), ExecutionBackend::Naive);
        assert_eq!(parse_backend("parallel:4").unwrap().workers(), 4);
        assert!(parse_backend("gpu").is_err());
        assert!(parse_backend("parallel:0").is_err());
    }

    #[test]
    fn report_schema() {
        let r = quick(BenchOp::Encode, 2, ExecutionBackend::Naive);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["backend", "count", "key_bits", "ledger", "operator", "throughput", "verified", "wall_time_s", "workers"]
        );
        assert_eq!(v["operator"], "encode");
        let cfg = BenchConfig { runs: 0, ..BenchConfig::new(BenchOp::Hsum, 1, 128, ExecutionBackend::Naive) };
        assert!(matches!(run(&cfg), Err(BenchError::ZeroRuns)));
    }
}
