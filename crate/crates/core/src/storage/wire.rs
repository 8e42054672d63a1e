//! Byte layout of a serialized ciphertext batch.
//!
//! All integers are little-endian.
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4   | magic `HAFB` |
//! | 4..8   | version (u32) = 1 |
//! | 8..16  | count (u64) |
//! | 16..20 | key_bits (u32) |
//! | 20..28 | rows, cols (u32 each; cols = 0 marks a vector of length rows) |
//! | 28     | exponent mode: 0 shared, 1 per element |
//! | 29..32 | zero padding |
//!
//! The header is followed by 1 or `count` i32 exponents, then `count`
//! ciphertext words of `ceil(2·key_bits/8)` bytes each, zero-padded at the
//! high end.

use num_bigint::BigUint;
use thiserror::Error;

use super::pool::{BufferHandle, BufferPool, PoolError};
use crate::batch::{BatchError, CiphertextBatch, Exponents, Shape};
use crate::paillier::{ciphertext_word_bytes, PublicKey};

pub const MAGIC: [u8; 4] = *b"HAFB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

const MODE_SHARED: u8 = 0;
const MODE_PER_ELEMENT: u8 = 1;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(&'static str),
    #[error("truncated input: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(usize),
    #[error("buffer holds {available} bytes, {required} required")]
    Undersized { required: usize, available: usize },
    #[error("batch is written for a {found}-bit key, expected {expected}")]
    KeySize { expected: u32, found: u32 },
    #[error("shape {0:?} cannot be represented")]
    Unrepresentable(Shape),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

pub type Result<T, E = WireError> = std::result::Result<T, E>;

/// Parsed fixed-size header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub count: u64,
    pub key_bits: u32,
    pub rows: u32,
    pub cols: u32,
    pub per_element: bool,
}

impl Header {
    pub fn word_bytes(&self) -> usize {
        ciphertext_word_bytes(self.key_bits)
    }

    fn exponent_count(&self) -> usize {
        if self.per_element {
            self.count as usize
        } else {
            1
        }
    }

    /// Total encoded length implied by the header.
    pub fn total_len(&self) -> usize {
        HEADER_LEN + 4 * self.exponent_count() + self.count as usize * self.word_bytes()
    }

    fn shape(&self) -> Shape {
        if self.cols == 0 {
            Shape::Vector(self.rows as usize)
        } else {
            Shape::Matrix {
                rows: self.rows as usize,
                cols: self.cols as usize,
            }
        }
    }
}

fn header_of(c: &CiphertextBatch) -> Result<Header> {
    let (rows, cols) = match c.shape() {
        Shape::Vector(len) => (len, 0),
        Shape::Matrix { rows, cols } if cols > 0 => (rows, cols),
        shape => return Err(WireError::Unrepresentable(shape)),
    };
    let fit = |v: usize| u32::try_from(v).map_err(|_| WireError::Unrepresentable(c.shape()));
    Ok(Header {
        count: c.count() as u64,
        key_bits: c.key().key_bits,
        rows: fit(rows)?,
        cols: fit(cols)?,
        per_element: matches!(c.exponents(), Exponents::PerElement(_)),
    })
}

/// Exact number of bytes [`write_into`] produces for `c`.
pub fn encoded_len(c: &CiphertextBatch) -> Result<usize> {
    Ok(header_of(c)?.total_len())
}

/// Writes `c` to the front of `out` and returns the byte count.
pub fn write_into(c: &CiphertextBatch, out: &mut [u8]) -> Result<usize> {
    let h = header_of(c)?;
    let required = h.total_len();
    if out.len() < required {
        return Err(WireError::Undersized {
            required,
            available: out.len(),
        });
    }
    let out = &mut out[..required];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..8].copy_from_slice(&VERSION.to_le_bytes());
    out[8..16].copy_from_slice(&h.count.to_le_bytes());
    out[16..20].copy_from_slice(&h.key_bits.to_le_bytes());
    out[20..24].copy_from_slice(&h.rows.to_le_bytes());
    out[24..28].copy_from_slice(&h.cols.to_le_bytes());
    out[28] = if h.per_element { MODE_PER_ELEMENT } else { MODE_SHARED };
    out[29..32].fill(0);

    let mut pos = HEADER_LEN;
    let exponents: Vec<i32> = match c.exponents() {
        Exponents::Shared(e) => vec![*e],
        Exponents::PerElement(v) => v.clone(),
    };
    for e in exponents {
        out[pos..pos + 4].copy_from_slice(&e.to_le_bytes());
        pos += 4;
    }
    let w = h.word_bytes();
    for value in c.payload() {
        let bytes = value.to_bytes_le();
        let word = &mut out[pos..pos + w];
        // values are < n², so they always fit in one word
        word[..bytes.len()].copy_from_slice(&bytes);
        word[bytes.len()..].fill(0);
        pos += w;
    }
    Ok(required)
}

pub fn to_bytes(c: &CiphertextBatch) -> Result<Vec<u8>> {
    let mut out = vec![0u8; encoded_len(c)?];
    write_into(c, &mut out)?;
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || bytes[0..4] != MAGIC {
        return Err(if bytes.len() < 4 {
            WireError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            }
        } else {
            WireError::BadMagic
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let per_element = match bytes[28] {
        MODE_SHARED => false,
        MODE_PER_ELEMENT => true,
        _ => return Err(WireError::CorruptHeader("unknown exponent mode")),
    };
    if bytes[29..32] != [0, 0, 0] {
        return Err(WireError::CorruptHeader("nonzero padding"));
    }
    let h = Header {
        count,
        key_bits: u32_at(16),
        rows: u32_at(20),
        cols: u32_at(24),
        per_element,
    };
    if h.key_bits == 0 {
        return Err(WireError::CorruptHeader("zero key size"));
    }
    let cells = h.rows as u64 * h.cols.max(1) as u64;
    if cells != count {
        return Err(WireError::CorruptHeader("shape does not match count"));
    }
    if usize::try_from(count).is_err() {
        return Err(WireError::CorruptHeader("count exceeds address space"));
    }
    Ok(h)
}

/// Parses a batch written under `pk`. The input must be exactly one batch.
pub fn from_bytes(pk: &PublicKey, bytes: &[u8]) -> Result<CiphertextBatch> {
    let h = read_header(bytes)?;
    if h.key_bits != pk.key_bits() {
        return Err(WireError::KeySize {
            expected: pk.key_bits(),
            found: h.key_bits,
        });
    }
    let expected = h.total_len();
    if bytes.len() < expected {
        return Err(WireError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(WireError::TrailingBytes(bytes.len() - expected));
    }
    let mut pos = HEADER_LEN;
    let mut exps = Vec::with_capacity(h.exponent_count());
    for _ in 0..h.exponent_count() {
        exps.push(i32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")));
        pos += 4;
    }
    let exponents = if h.per_element {
        Exponents::PerElement(exps)
    } else {
        Exponents::Shared(exps[0])
    };
    let w = h.word_bytes();
    let payload = bytes[pos..]
        .chunks_exact(w)
        .map(BigUint::from_bytes_le)
        .collect();
    Ok(CiphertextBatch::new(pk, h.shape(), exponents, payload)?)
}

/// A batch serialized into a pool buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SerializedBatch {
    pub handle: BufferHandle,
    pub len: usize,
}

/// Serializes into a fresh or reused pool buffer of exactly the encoded size.
pub fn serialize(pool: &BufferPool, c: &CiphertextBatch) -> Result<SerializedBatch> {
    let len = encoded_len(c)?;
    // the pool rejects empty buffers; the header alone is never empty
    let handle = pool.alloc(len)?;
    serialize_into(pool, c, handle).inspect_err(|_| {
        let _ = pool.free(handle);
    })
}

/// Serializes into a caller-provided buffer.
pub fn serialize_into(pool: &BufferPool, c: &CiphertextBatch, handle: BufferHandle) -> Result<SerializedBatch> {
    let len = pool.with_buffer(handle, |buf| write_into(c, buf))??;
    Ok(SerializedBatch { handle, len })
}

/// Parses the batch and returns its buffer to the pool.
pub fn deserialize(pool: &BufferPool, pk: &PublicKey, s: SerializedBatch) -> Result<CiphertextBatch> {
    let parsed = pool.with_buffer(s.handle, |buf| from_bytes(pk, &buf[..s.len.min(buf.len())]))?;
    pool.free(s.handle)?;
    parsed
}

/// Copies the serialized bytes out of the pool without releasing the buffer.
pub fn bytes_of(pool: &BufferPool, s: SerializedBatch) -> Result<Vec<u8>> {
    Ok(pool.with_buffer(s.handle, |buf| buf[..s.len].to_vec())?)
}
