//! A simulated accelerator memory region.
//!
//! Batches live in the arena behind [`ArenaHandle`]s. Every host↔arena copy
//! is recorded in a [`TransferLedger`], so the effect of keeping intermediate
//! results resident is measurable as byte counts. When the arena is full,
//! least recently used unpinned results are spilled to a host store and
//! restored on next use, which never changes a value.

mod ledger;
mod pipeline;

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::RngCore;
use thiserror::Error;

use crate::batch::{self, BatchError, CiphertextBatch, ExecutionBackend, Exponents, PlaintextBatch, Shape};
use crate::paillier::{KeyId, PublicKey};
use crate::storage::wire::{self, WireError, HEADER_LEN};

pub use ledger::{Transfer, TransferLedger};
pub use pipeline::{fore_gradient_constants, run_fore_gradient_pipeline, PIPELINE_OPS};

pub const DEFAULT_ARENA_CAPACITY: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("handle {0} does not belong to this arena")]
    UnknownHandle(u64),
    #[error("handle {0} was released")]
    UseAfterRelease(u64),
    #[error("handle {0} is already released")]
    DoubleRelease(u64),
    #[error("arena cannot free {needed} bytes: {available} available after evicting every unpinned result")]
    CapacityExhausted { needed: u64, available: u64 },
    #[error("{op:?} takes {expected} operands, got {found}")]
    Arity { op: Op, expected: usize, found: usize },
    #[error("operand {index} of {op:?} must be a {expected} batch")]
    OperandKind { op: Op, index: usize, expected: ValueKind },
    #[error("handle {id} does not hold a {expected} batch")]
    KindMismatch { id: u64, expected: ValueKind },
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub type Result<T, E = ArenaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Ciphertext,
    Plaintext,
}

impl std::fmt::Display for ValueKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ValueKind::Ciphertext => "ciphertext",
            ValueKind::Plaintext => "plaintext",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    Cipher(CiphertextBatch),
    Plain(PlaintextBatch),
}

impl Value {
    fn kind(&self) -> ValueKind {
        match self {
            Value::Cipher(_) => ValueKind::Ciphertext,
            Value::Plain(_) => ValueKind::Plaintext,
        }
    }

    /// Bytes the value occupies in transfer form. Ciphertext words are
    /// `ceil(2·key_bits/8)` bytes, plaintext words `ceil(key_bits/8)`.
    fn size_bytes(&self) -> Result<u64> {
        Ok(match self {
            Value::Cipher(c) => wire::encoded_len(c)? as u64,
            Value::Plain(p) => {
                let exps = match p.exponents() {
                    Exponents::Shared(_) => 1,
                    Exponents::PerElement(v) => v.len(),
                };
                let word = (p.key().key_bits as usize).div_ceil(8);
                (HEADER_LEN + 4 * exps + p.count() * word) as u64
            }
        })
    }

    fn handle_meta(&self) -> (Shape, Exponents, KeyId) {
        match self {
            Value::Cipher(c) => (c.shape(), c.exponents().clone(), c.key()),
            Value::Plain(p) => (p.shape(), p.exponents().clone(), p.key()),
        }
    }
}

/// Descriptor of a cached arena region. Cloning a handle does not extend
/// the region's life; `release` ends it for every copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArenaHandle {
    id: u64,
    address: u64,
    size_bytes: u64,
    kind: ValueKind,
    shape: Shape,
    exponents: Exponents,
    key: KeyId,
}

impl ArenaHandle {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn address(&self) -> u64 {
        self.address
    }

    pub fn size_bytes(&self) -> u64 {
        self.size_bytes
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn exponents(&self) -> &Exponents {
        &self.exponents
    }

    pub fn key(&self) -> KeyId {
        self.key
    }
}

/// Homomorphic operator executed inside the arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// plaintext → ciphertext
    Encrypt,
    /// ciphertext + ciphertext
    Add,
    /// ciphertext + plaintext
    AddPlain,
    /// ciphertext × plaintext
    MulPlain,
    /// ciphertext reduction
    Sum { axis: Option<usize> },
    /// encrypted left operand × plaintext matrix
    MatMul,
    /// plaintext × plaintext on the encoding grid
    PlainMul,
    /// fresh randomness on a ciphertext
    Obfuscate,
}

impl Op {
    fn operand_kinds(self) -> &'static [ValueKind] {
        use ValueKind::*;
        match self {
            Op::Encrypt => &[Plaintext],
            Op::Add => &[Ciphertext, Ciphertext],
            Op::AddPlain | Op::MulPlain | Op::MatMul => &[Ciphertext, Plaintext],
            Op::Sum { .. } | Op::Obfuscate => &[Ciphertext],
            Op::PlainMul => &[Plaintext, Plaintext],
        }
    }
}

/// An operand: either already in the arena or supplied by the host.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Handle(&'a ArenaHandle),
    Cipher(&'a CiphertextBatch),
    Plain(&'a PlaintextBatch),
}

/// Result of [`Arena::exec_op`]: a handle when cached, the value otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Handle(ArenaHandle),
    Cipher(CiphertextBatch),
    Plain(PlaintextBatch),
}

impl Output {
    pub fn as_input(&self) -> Input<'_> {
        match self {
            Output::Handle(h) => Input::Handle(h),
            Output::Cipher(c) => Input::Cipher(c),
            Output::Plain(p) => Input::Plain(p),
        }
    }

    pub fn handle(&self) -> Option<&ArenaHandle> {
        match self {
            Output::Handle(h) => Some(h),
            _ => None,
        }
    }
}

enum Slot {
    Resident(Arc<Value>),
    /// held by the host-side spill store
    Spilled(Arc<Value>),
}

struct Entry {
    handle: ArenaHandle,
    slot: Slot,
    last_used: u64,
    pins: u32,
}

struct State {
    capacity: u64,
    tick: u64,
    next_id: u64,
    next_address: u64,
    entries: HashMap<u64, Entry>,
    released: HashSet<u64>,
    resident_bytes: u64,
    spilled_bytes: u64,
    ledger: TransferLedger,
}

pub struct Arena {
    pk: PublicKey,
    backend: ExecutionBackend,
    state: Mutex<State>,
}

impl Arena {
    pub fn new(pk: PublicKey, backend: ExecutionBackend, capacity_bytes: u64) -> Self {
        Self {
            pk,
            backend,
            state: Mutex::new(State {
                capacity: capacity_bytes,
                tick: 0,
                next_id: 0,
                next_address: 0,
                entries: HashMap::new(),
                released: HashSet::new(),
                resident_bytes: 0,
                spilled_bytes: 0,
                ledger: TransferLedger::default(),
            }),
        }
    }

    pub fn with_defaults(pk: PublicKey) -> Self {
        Self::new(pk, ExecutionBackend::Naive, DEFAULT_ARENA_CAPACITY)
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn backend(&self) -> &ExecutionBackend {
        &self.backend
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn ledger(&self) -> TransferLedger {
        self.lock().ledger
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.lock().capacity
    }

    pub fn resident_bytes(&self) -> u64 {
        self.lock().resident_bytes
    }

    pub fn spilled_bytes(&self) -> u64 {
        self.lock().spilled_bytes
    }

    /// Checks the ledger identity against current residency.
    pub fn conservation_holds(&self) -> bool {
        let s = self.lock();
        s.ledger.accounted_bytes() == (s.resident_bytes + s.spilled_bytes) as i128
    }

    pub fn is_live(&self, h: &ArenaHandle) -> bool {
        self.lock().entries.contains_key(&h.id)
    }

    pub fn is_resident(&self, h: &ArenaHandle) -> bool {
        matches!(self.lock().entries.get(&h.id).map(|e| &e.slot), Some(Slot::Resident(_)))
    }

    pub fn upload_cipher(&self, c: &CiphertextBatch) -> Result<ArenaHandle> {
        self.upload(Value::Cipher(c.clone()))
    }

    pub fn upload_plain(&self, p: &PlaintextBatch) -> Result<ArenaHandle> {
        self.upload(Value::Plain(p.clone()))
    }

    fn upload(&self, v: Value) -> Result<ArenaHandle> {
        let v = self.transfer(v)?;
        let mut s = self.lock();
        s.ledger.serializations += 1;
        let size = v.size_bytes()?;
        let h = s.insert(v, size)?;
        s.ledger.uploads.record(size);
        Ok(h)
    }

    /// Copies a value through its byte form, as a device transfer would.
    fn transfer(&self, v: Value) -> Result<Value> {
        Ok(match v {
            Value::Cipher(c) => Value::Cipher(wire::from_bytes(&self.pk, &wire::to_bytes(&c)?)?),
            plain => plain,
        })
    }

    pub fn download_cipher(&self, h: &ArenaHandle) -> Result<CiphertextBatch> {
        match self.download(h)? {
            Value::Cipher(c) => Ok(c),
            Value::Plain(_) => Err(ArenaError::KindMismatch {
                id: h.id,
                expected: ValueKind::Ciphertext,
            }),
        }
    }

    pub fn download_plain(&self, h: &ArenaHandle) -> Result<PlaintextBatch> {
        match self.download(h)? {
            Value::Plain(p) => Ok(p),
            Value::Cipher(_) => Err(ArenaError::KindMismatch {
                id: h.id,
                expected: ValueKind::Plaintext,
            }),
        }
    }

    /// Copies a value to the host. The handle stays live. A spilled value is
    /// already on the host, so no transfer is recorded for it.
    fn download(&self, h: &ArenaHandle) -> Result<Value> {
        let (value, resident) = {
            let mut s = self.lock();
            let tick = s.touch();
            let e = s.entry_mut(h.id)?;
            e.last_used = tick;
            match &e.slot {
                Slot::Resident(v) => (Arc::clone(v), true),
                Slot::Spilled(v) => (Arc::clone(v), false),
            }
        };
        if !resident {
            return Ok((*value).clone());
        }
        let out = self.transfer((*value).clone())?;
        let mut s = self.lock();
        s.ledger.downloads.record(h.size_bytes);
        s.ledger.deserializations += 1;
        Ok(out)
    }

    pub fn release(&self, h: &ArenaHandle) -> Result<()> {
        let mut s = self.lock();
        let e = match s.entries.remove(&h.id) {
            Some(e) => e,
            None if s.released.contains(&h.id) => return Err(ArenaError::DoubleRelease(h.id)),
            None => return Err(ArenaError::UnknownHandle(h.id)),
        };
        let size = e.handle.size_bytes;
        match e.slot {
            Slot::Resident(_) => s.resident_bytes -= size,
            Slot::Spilled(_) => s.spilled_bytes -= size,
        }
        s.ledger.released_bytes += size;
        s.released.insert(h.id);
        Ok(())
    }

    /// Spills least recently used unpinned results until `needed_bytes` are
    /// free. Returns the spilled handle ids in eviction order.
    pub fn evict_lru(&self, needed_bytes: u64) -> Result<Vec<u64>> {
        self.lock().make_room(needed_bytes)
    }

    /// Runs `op` on the operands. Host operands are uploaded for the duration
    /// of the call. With `cache_result` the output stays resident and only
    /// its handle is returned; otherwise it is downloaded and dropped from
    /// the arena.
    pub fn exec_op(&self, op: Op, inputs: &[Input<'_>], cache_result: bool, rng: &mut dyn RngCore) -> Result<Output> {
        let kinds = op.operand_kinds();
        if inputs.len() != kinds.len() {
            return Err(ArenaError::Arity {
                op,
                expected: kinds.len(),
                found: inputs.len(),
            });
        }
        for (index, (input, &expected)) in inputs.iter().zip(kinds).enumerate() {
            let kind = match input {
                Input::Handle(h) => h.kind,
                Input::Cipher(_) => ValueKind::Ciphertext,
                Input::Plain(_) => ValueKind::Plaintext,
            };
            if kind != expected {
                return Err(ArenaError::OperandKind { op, index, expected });
            }
        }

        let mut pinned: Vec<u64> = Vec::new();
        let mut temps: Vec<ArenaHandle> = Vec::new();
        let operands = self.acquire(inputs, &mut pinned, &mut temps);
        let result = operands.and_then(|values| self.compute(op, &values, rng));
        let output = result.and_then(|value| {
            let mut s = self.lock();
            let size = value.size_bytes()?;
            // inputs stay pinned so the output cannot displace them
            let h = s.insert(value, size)?;
            s.ledger.produced_bytes += size;
            Ok(h)
        });
        {
            let mut s = self.lock();
            for id in &pinned {
                if let Some(e) = s.entries.get_mut(id) {
                    e.pins -= 1;
                }
            }
        }
        for t in &temps {
            self.release(t)?;
        }
        let h = output?;
        if cache_result {
            return Ok(Output::Handle(h));
        }
        let value = self.download(&h)?;
        {
            let mut s = self.lock();
            let e = s.entries.remove(&h.id).expect("fresh result is live");
            debug_assert!(matches!(e.slot, Slot::Resident(_)));
            s.resident_bytes -= h.size_bytes;
            s.ledger.delivered_bytes += h.size_bytes;
            s.released.insert(h.id);
        }
        Ok(match value {
            Value::Cipher(c) => Output::Cipher(c),
            Value::Plain(p) => Output::Plain(p),
        })
    }

    /// Pins handle operands, restoring spilled ones, and uploads host operands.
    fn acquire(&self, inputs: &[Input<'_>], pinned: &mut Vec<u64>, temps: &mut Vec<ArenaHandle>) -> Result<Vec<Arc<Value>>> {
        let mut values = Vec::with_capacity(inputs.len());
        for input in inputs {
            let h = match input {
                Input::Handle(h) => (*h).clone(),
                Input::Cipher(c) => {
                    let h = self.upload_cipher(c)?;
                    temps.push(h.clone());
                    h
                }
                Input::Plain(p) => {
                    let h = self.upload_plain(p)?;
                    temps.push(h.clone());
                    h
                }
            };
            let mut s = self.lock();
            s.restore(h.id)?;
            let tick = s.touch();
            let e = s.entry_mut(h.id)?;
            e.pins += 1;
            e.last_used = tick;
            pinned.push(h.id);
            match &e.slot {
                Slot::Resident(v) => values.push(Arc::clone(v)),
                Slot::Spilled(_) => unreachable!("restored above"),
            }
        }
        Ok(values)
    }

    fn compute(&self, op: Op, v: &[Arc<Value>], rng: &mut dyn RngCore) -> Result<Value> {
        let (pk, b) = (&self.pk, &self.backend);
        let c = |i: usize| match &*v[i] {
            Value::Cipher(c) => c,
            Value::Plain(_) => unreachable!("operand kinds checked"),
        };
        let p = |i: usize| match &*v[i] {
            Value::Plain(p) => p,
            Value::Cipher(_) => unreachable!("operand kinds checked"),
        };
        Ok(match op {
            Op::Encrypt => Value::Cipher(batch::batch_encrypt(pk, p(0), rng, b)?),
            Op::Add => Value::Cipher(batch::batch_add(pk, c(0), c(1), b)?),
            Op::AddPlain => Value::Cipher(batch::batch_add_plain(pk, c(0), p(1), b)?),
            Op::MulPlain => Value::Cipher(batch::batch_mul_plain(pk, c(0), p(1), b)?),
            Op::Sum { axis } => Value::Cipher(batch::batch_sum(pk, c(0), axis, b)?),
            Op::MatMul => Value::Cipher(batch::batch_matmul(pk, c(0), p(1), b)?),
            Op::PlainMul => Value::Plain(batch::plain_mul(pk, p(0), p(1), b)?),
            Op::Obfuscate => Value::Cipher(batch::batch_obfuscate(pk, c(0), rng, b)?),
        })
    }
}

impl State {
    fn touch(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    fn entry_mut(&mut self, id: u64) -> Result<&mut Entry> {
        if self.released.contains(&id) {
            return Err(ArenaError::UseAfterRelease(id));
        }
        self.entries.get_mut(&id).ok_or(ArenaError::UnknownHandle(id))
    }

    fn insert(&mut self, value: Value, size: u64) -> Result<ArenaHandle> {
        self.make_room(size)?;
        let (shape, exponents, key) = value.handle_meta();
        let handle = ArenaHandle {
            id: self.next_id,
            address: self.next_address,
            size_bytes: size,
            kind: value.kind(),
            shape,
            exponents,
            key,
        };
        self.next_id += 1;
        self.next_address += size;
        let tick = self.touch();
        self.entries.insert(
            handle.id,
            Entry {
                handle: handle.clone(),
                slot: Slot::Resident(Arc::new(value)),
                last_used: tick,
                pins: 0,
            },
        );
        self.resident_bytes += size;
        Ok(handle)
    }

    fn make_room(&mut self, needed: u64) -> Result<Vec<u64>> {
        let free = |s: &State| s.capacity.saturating_sub(s.resident_bytes);
        let mut evicted = Vec::new();
        if free(self) >= needed {
            return Ok(evicted);
        }
        let mut candidates: Vec<(u64, u64)> = self
            .entries
            .values()
            .filter(|e| e.pins == 0 && matches!(e.slot, Slot::Resident(_)))
            .map(|e| (e.last_used, e.handle.id))
            .collect();
        candidates.sort_unstable();
        let reclaimable: u64 = candidates.iter().map(|&(_, id)| self.entries[&id].handle.size_bytes).sum();
        if free(self) + reclaimable < needed {
            return Err(ArenaError::CapacityExhausted {
                needed,
                available: free(self) + reclaimable,
            });
        }
        for (_, id) in candidates {
            if free(self) >= needed {
                break;
            }
            let e = self.entries.get_mut(&id).expect("candidate is live");
            let size = e.handle.size_bytes;
            let Slot::Resident(v) = &e.slot else { unreachable!() };
            e.slot = Slot::Spilled(Arc::clone(v));
            self.resident_bytes -= size;
            self.spilled_bytes += size;
            self.ledger.downloads.record(size);
            self.ledger.spilled.record(size);
            evicted.push(id);
        }
        Ok(evicted)
    }

    fn restore(&mut self, id: u64) -> Result<()> {
        let size = match &self.entry_mut(id)?.slot {
            Slot::Resident(_) => return Ok(()),
            Slot::Spilled(_) => self.entries[&id].handle.size_bytes,
        };
        self.make_room(size)?;
        let e = self.entries.get_mut(&id).expect("checked live");
        let Slot::Spilled(v) = &e.slot else { unreachable!() };
        e.slot = Slot::Resident(Arc::clone(v));
        self.spilled_bytes -= size;
        self.resident_bytes += size;
        self.ledger.uploads.record(size);
        self.ledger.restored.record(size);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{batch_add, batch_decrypt};
    use crate::paillier::{keygen, seeded_rng, KeyPair};

    fn key() -> KeyPair {
        keygen(256, &mut seeded_rng(21)).unwrap()
    }

    fn cipher(kp: &KeyPair, v: &[f64], seed: u64) -> CiphertextBatch {
        let p = PlaintextBatch::encode(&kp.public, v, Shape::Vector(v.len()), Some(-4)).unwrap();
        batch::batch_encrypt(&kp.public, &p, &mut seeded_rng(seed), &ExecutionBackend::Naive).unwrap()
    }

    fn open(kp: &KeyPair, c: &CiphertextBatch) -> Vec<f64> {
        batch_decrypt(&kp.private, c, &ExecutionBackend::Naive).unwrap().decode(&kp.public).unwrap()
    }

    #[test]
    fn upload_download_round_trip_and_accounting() {
        let kp = key();
        let arena = Arena::with_defaults(kp.public.clone());
        let c = cipher(&kp, &[1.0, -2.5], 1);
        let before = arena.ledger();
        let h = arena.upload_cipher(&c).unwrap();
        let d = arena.ledger().since(&before);
        assert_eq!(d.uploads, Transfer { count: 1, bytes: wire::encoded_len(&c).unwrap() as u64 });
        assert_eq!(d.downloads.count, 0);
        assert_eq!(arena.download_cipher(&h).unwrap(), c);
        assert!(arena.is_live(&h));
        let h2 = arena.upload_cipher(&c).unwrap();
        assert_ne!(h.id(), h2.id());
        assert!(arena.conservation_holds());
    }

    #[test]
    fn release_rules() {
        let kp = key();
        let arena = Arena::new(kp.public.clone(), ExecutionBackend::Naive, 2000);
        let c = cipher(&kp, &[1.0, 2.0, 3.0], 1);
        let h = arena.upload_cipher(&c).unwrap();
        arena.release(&h).unwrap();
        assert!(matches!(arena.download_cipher(&h), Err(ArenaError::UseAfterRelease(_))));
        assert!(matches!(arena.release(&h), Err(ArenaError::DoubleRelease(_))));
        // the freed space takes the next upload without spilling
        let again = arena.upload_cipher(&c).unwrap();
        assert!(arena.is_resident(&again));
        assert_eq!(arena.ledger().spilled.count, 0);
        assert!(arena.conservation_holds());
    }

    #[test]
    fn cached_exec_downloads_nothing() {
        let kp = key();
        let arena = Arena::with_defaults(kp.public.clone());
        let (a, b) = (cipher(&kp, &[1.0, 2.0], 1), cipher(&kp, &[3.0, 4.0], 2));
        let (ha, hb) = (arena.upload_cipher(&a).unwrap(), arena.upload_cipher(&b).unwrap());
        let before = arena.ledger();
        let out = arena.exec_op(Op::Add, &[Input::Handle(&ha), Input::Handle(&hb)], true, &mut seeded_rng(0)).unwrap();
        assert_eq!(arena.ledger().since(&before).downloads.count, 0);
        let got = arena.download_cipher(out.handle().unwrap()).unwrap();
        assert_eq!(got, batch_add(&kp.public, &a, &b, &ExecutionBackend::Naive).unwrap());
        assert_eq!(open(&kp, &got), vec![4.0, 6.0]);
        assert!(arena.conservation_holds());
    }

    #[test]
    fn uncached_exec_returns_value() {
        let kp = key();
        let arena = Arena::with_defaults(kp.public.clone());
        let a = cipher(&kp, &[1.0, 2.0, 3.0, 4.0], 1);
        let out = arena.exec_op(Op::Sum { axis: None }, &[Input::Cipher(&a)], false, &mut seeded_rng(0)).unwrap();
        let Output::Cipher(s) = out else { panic!("expected a value") };
        assert_eq!(open(&kp, &s), vec![10.0]);
        let l = arena.ledger();
        assert_eq!((l.uploads.count, l.downloads.count), (1, 1));
        assert_eq!(arena.resident_bytes(), 0);
        assert!(arena.conservation_holds());
    }

    #[test]
    fn operand_checks() {
        let kp = key();
        let arena = Arena::with_defaults(kp.public.clone());
        let a = cipher(&kp, &[1.0], 1);
        let mut rng = seeded_rng(0);
        assert!(matches!(arena.exec_op(Op::Add, &[Input::Cipher(&a)], true, &mut rng), Err(ArenaError::Arity { .. })));
        assert!(matches!(arena.exec_op(Op::Encrypt, &[Input::Cipher(&a)], true, &mut rng), Err(ArenaError::OperandKind { .. })));
        let wide = cipher(&kp, &[1.0, 2.0], 2);
        assert!(matches!(
            arena.exec_op(Op::Add, &[Input::Cipher(&a), Input::Cipher(&wide)], true, &mut rng),
            Err(ArenaError::Batch(BatchError::ShapeMismatch { .. }))
        ));
        // failed calls leave nothing behind
        assert_eq!(arena.resident_bytes(), 0);
        assert!(arena.conservation_holds());
    }

    #[test]
    fn lru_spill_and_restore() {
        let kp = key();
        let pk = &kp.public;
        let x = cipher(&kp, &[1.0, 2.0], 1);
        let size = wire::encoded_len(&x).unwrap() as u64;
        // room for two results
        let arena = Arena::new(pk.clone(), ExecutionBackend::Naive, 2 * size);
        let mut rng = seeded_rng(0);
        let ha = arena.upload_cipher(&x).unwrap();
        let hb = arena.upload_cipher(&cipher(&kp, &[5.0, 6.0], 2)).unwrap();
        let b_before = arena.download_cipher(&hb).unwrap();
        arena.download_cipher(&ha).unwrap();
        let before = arena.ledger();
        let hc = arena.upload_cipher(&cipher(&kp, &[7.0, 8.0], 3)).unwrap();
        assert!(arena.is_resident(&ha));
        assert!(!arena.is_resident(&hb));
        assert!(arena.is_resident(&hc));
        assert!(arena.conservation_holds());

        // using B restores it over A, and its output then displaces C
        let sum = arena.exec_op(Op::Sum { axis: None }, &[Input::Handle(&hb)], false, &mut rng).unwrap();
        let Output::Cipher(sum) = sum else { panic!() };
        assert_eq!(open(&kp, &sum), vec![11.0]);
        assert_eq!(arena.download_cipher(&hb).unwrap(), b_before);
        let d = arena.ledger().since(&before);
        assert_eq!(d.spilled.count, 3);
        assert_eq!(d.restored.count, 1);
        assert!(arena.conservation_holds());
    }

    #[test]
    fn spill_cycle_costs_one_download_and_one_upload() {
        let kp = key();
        let x = cipher(&kp, &[1.0], 1);
        let size = wire::encoded_len(&x).unwrap() as u64;
        let arena = Arena::new(kp.public.clone(), ExecutionBackend::Naive, 3 * size);
        let ha = arena.upload_cipher(&x).unwrap();
        let hb = arena.upload_cipher(&cipher(&kp, &[2.0], 2)).unwrap();
        let before = arena.ledger();
        assert_eq!(arena.evict_lru(2 * size).unwrap(), vec![ha.id()]);
        let mut rng = seeded_rng(0);
        let out = arena.exec_op(Op::Add, &[Input::Handle(&ha), Input::Handle(&hb)], true, &mut rng).unwrap();
        let d = arena.ledger().since(&before);
        assert_eq!((d.downloads.count, d.uploads.count), (1, 1));
        assert_eq!((d.downloads.bytes, d.uploads.bytes), (size, size));
        assert_eq!(open(&kp, &arena.download_cipher(out.handle().unwrap()).unwrap()), vec![3.0]);
    }

    #[test]
    fn pinned_operands_are_never_evicted() {
        let kp = key();
        let x = cipher(&kp, &[1.0], 1);
        let size = wire::encoded_len(&x).unwrap() as u64;
        let arena = Arena::new(kp.public.clone(), ExecutionBackend::Naive, 2 * size);
        let ha = arena.upload_cipher(&x).unwrap();
        let hb = arena.upload_cipher(&cipher(&kp, &[2.0], 2)).unwrap();
        // both inputs are pinned while the output needs a third slot
        let err = arena.exec_op(Op::Add, &[Input::Handle(&ha), Input::Handle(&hb)], true, &mut seeded_rng(0));
        assert!(matches!(err, Err(ArenaError::CapacityExhausted { .. })));
        assert!(arena.is_resident(&ha) && arena.is_resident(&hb));
        assert!(matches!(arena.evict_lru(3 * size), Err(ArenaError::CapacityExhausted { .. })));
        assert!(arena.conservation_holds());
    }

    #[test]
    fn foreign_handles_are_rejected() {
        let kp = key();
        let a1 = Arena::with_defaults(kp.public.clone());
        let a2 = Arena::with_defaults(kp.public.clone());
        let h = a1.upload_cipher(&cipher(&kp, &[1.0], 1)).unwrap();
        a1.upload_cipher(&cipher(&kp, &[1.0], 1)).unwrap();
        let h2 = a1.upload_cipher(&cipher(&kp, &[1.0], 1)).unwrap();
        assert!(matches!(a2.download_cipher(&h2), Err(ArenaError::UnknownHandle(2))));
        assert!(matches!(a2.release(&h), Err(ArenaError::UnknownHandle(0))));
    }
}
