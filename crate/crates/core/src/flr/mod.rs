//! Federated logistic regression on top of the arena.
//!
//! Vertical training (`hetero`) splits features between a labelled guest and
//! a host; horizontal training (`homo`) splits rows between parties. In both
//! an arbiter holds the only private key.

pub mod audit;
pub mod channel;
pub mod dataset;
pub mod hetero;
pub mod homo;
pub mod math;
pub mod oracle;
pub mod synth;

use std::collections::BTreeMap;

use num_bigint::{BigUint, RandBigInt};
use num_traits::Num;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{Arena, ArenaError, Output, TransferLedger};
use crate::batch::{batch_decrypt, BatchError, CiphertextBatch, ExecutionBackend, Exponents, PlaintextBatch, Shape};
use crate::paillier::{KeyPair, PaillierError, PublicKey};
use crate::storage::{AggregateError, WireError};

use channel::{ChannelError, Role};
use dataset::DatasetError;

#[derive(Debug, Error)]
pub enum FlrError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("malformed message payload: {0}")]
    Payload(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<serde_json::Error> for FlrError {
    fn from(e: serde_json::Error) -> Self {
        FlrError::Payload(e.to_string())
    }
}

pub type Result<T, E = FlrError> = std::result::Result<T, E>;

/// Fixed-point exponent of every encoded training value.
pub const DEFAULT_PRECISION: i32 = -8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub key_bits: u32,
    /// Permits keys below the production minimum.
    pub allow_unsafe_keys: bool,
    /// Keeps intermediates resident in each party's arena.
    pub cache: bool,
    pub seed: u64,
    pub precision: i32,
    pub backend: ExecutionBackend,
    pub arena_capacity_bytes: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.15,
            key_bits: 1024,
            allow_unsafe_keys: false,
            cache: true,
            seed: 0,
            precision: DEFAULT_PRECISION,
            backend: ExecutionBackend::Naive,
            arena_capacity_bytes: crate::arena::DEFAULT_ARENA_CAPACITY,
        }
    }
}

impl TrainConfig {
    /// Rejects settings no run could use, including insecure key sizes.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FlrError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FlrError::Config("learning rate must be a positive number".into()));
        }
        crate::paillier::check_key_policy(self.key_bits, self.allow_unsafe_keys)?;
        Ok(())
    }

    fn arena(&self, pk: &PublicKey) -> Arena {
        Arena::new(pk.clone(), self.backend, self.arena_capacity_bytes)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    pub loss: f64,
    /// norm of the last step's full gradient
    pub grad_norm: f64,
    /// cumulative arena traffic per role
    pub ledger: BTreeMap<String, TransferLedger>,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("epoch record serializes")
    }
}

/// A decryption performed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecryptEvent {
    pub role: Role,
    pub step: usize,
    pub elements: usize,
}

/// Plaintext residues of a masked value, as sent back by the arbiter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedResidues {
    pub exponent: i32,
    /// lowercase hex
    pub residues: Vec<String>,
}

impl MaskedResidues {
    fn from_plain(p: &PlaintextBatch) -> Result<Self> {
        let exponent = p
            .exponents()
            .uniform()
            .ok_or_else(|| FlrError::Payload("masked value has mixed exponents".into()))?;
        Ok(Self {
            exponent,
            residues: p.mantissas().iter().map(|m| m.to_str_radix(16)).collect(),
        })
    }

    fn parse_residues(&self) -> Result<Vec<BigUint>> {
        self.residues
            .iter()
            .map(|h| BigUint::from_str_radix(h, 16).map_err(|_| FlrError::Payload(format!("bad residue {h:?}"))))
            .collect()
    }
}

/// Uniform additive mask over `Z_n`, one word per element.
pub(crate) fn draw_mask(pk: &PublicKey, count: usize, exponent: i32, rng: &mut dyn RngCore) -> Result<PlaintextBatch> {
    let words = (0..count).map(|_| rng.gen_biguint_below(pk.n())).collect();
    Ok(PlaintextBatch::new(pk, Shape::Vector(count), Exponents::Shared(exponent), words)?)
}

/// Removes `mask` from arbiter-decrypted residues and decodes the result.
pub(crate) fn unmask(pk: &PublicKey, masked: &MaskedResidues, mask: &PlaintextBatch) -> Result<Vec<f64>> {
    let residues = masked.parse_residues()?;
    if residues.len() != mask.count() || Some(masked.exponent) != mask.exponents().uniform() {
        return Err(FlrError::Payload("masked gradient does not match the pending mask".into()));
    }
    let n = pk.n();
    let words = residues
        .iter()
        .zip(mask.mantissas())
        .map(|(r, m)| {
            if r >= n {
                return Err(FlrError::Payload("residue out of range".into()));
            }
            Ok((r + n - m) % n)
        })
        .collect::<Result<Vec<_>>>()?;
    let plain = PlaintextBatch::new(pk, Shape::Vector(words.len()), Exponents::Shared(masked.exponent), words)?;
    Ok(plain.decode(pk)?)
}

/// Turns an op result into a value on the host, freeing any arena copy.
pub(crate) fn into_cipher(arena: &Arena, out: Output) -> Result<CiphertextBatch> {
    match out {
        Output::Cipher(c) => Ok(c),
        Output::Handle(h) => {
            let c = arena.download_cipher(&h)?;
            arena.release(&h)?;
            Ok(c)
        }
        Output::Plain(_) => Err(FlrError::Payload("expected a ciphertext result".into())),
    }
}

pub(crate) fn release(arena: &Arena, out: &Output) -> Result<()> {
    if let Some(h) = out.handle() {
        arena.release(h)?;
    }
    Ok(())
}

pub(crate) fn encode_vec(pk: &PublicKey, values: &[f64], exponent: i32) -> Result<PlaintextBatch> {
    Ok(PlaintextBatch::encode(pk, values, Shape::Vector(values.len()), Some(exponent))?)
}

/// The key holder. Decrypts on request and logs every decryption.
pub struct Arbiter {
    keys: KeyPair,
    backend: ExecutionBackend,
    events: Vec<DecryptEvent>,
}

impl Arbiter {
    pub fn new(keys: KeyPair, backend: ExecutionBackend) -> Self {
        Self {
            keys,
            backend,
            events: Vec::new(),
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    fn decrypt(&mut self, c: &CiphertextBatch, step: usize) -> Result<PlaintextBatch> {
        let p = batch_decrypt(&self.keys.private, c, &self.backend)?;
        self.events.push(DecryptEvent {
            role: Role::Arbiter,
            step,
            elements: c.count(),
        });
        Ok(p)
    }

    pub fn decrypt_events(&self) -> &[DecryptEvent] {
        &self.events
    }
}
