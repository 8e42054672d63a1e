//! Densely packed ciphertext and plaintext batches and the homomorphic
//! operators that run over them.

mod backend;
mod ops;

use num_bigint::BigUint;
use thiserror::Error;

use crate::codec::{self, CodecError, EncodedNumber, FixedPointCodec};
use crate::paillier::{KeyId, PaillierError, PublicKey};

pub use backend::ExecutionBackend;
pub use ops::{
    batch_add, batch_add_plain, batch_decrypt, batch_encrypt, batch_encrypt_with_nonces, batch_matmul,
    batch_mul_plain, batch_obfuscate, batch_sum, plain_mul,
};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("element {index}: {source}")]
    Element {
        index: usize,
        #[source]
        source: PaillierError,
    },
    #[error("element {index}: {source}")]
    Codec {
        index: usize,
        #[source]
        source: CodecError,
    },
    #[error("operand belongs to key {found}, expected {expected}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("exponent mismatch at element {index}: {left} vs {right}")]
    ExponentMismatch { index: usize, left: i32, right: i32 },
    #[error("reduced elements carry different exponents")]
    MixedExponents,
    #[error("invalid batch: {0}")]
    Invalid(&'static str),
}

pub type Result<T, E = BatchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Vector(usize),
    Matrix { rows: usize, cols: usize },
}

impl Shape {
    pub fn count(&self) -> usize {
        match *self {
            Shape::Vector(len) => len,
            Shape::Matrix { rows, cols } => rows * cols,
        }
    }

    /// Rows and columns, viewing a vector as a single row.
    pub fn as_matrix(&self) -> (usize, usize) {
        match *self {
            Shape::Vector(len) => (1, len),
            Shape::Matrix { rows, cols } => (rows, cols),
        }
    }
}

/// Exponent metadata: one shared value or one per element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Exponents {
    Shared(i32),
    PerElement(Vec<i32>),
}

impl Exponents {
    pub fn at(&self, i: usize) -> i32 {
        match self {
            Exponents::Shared(e) => *e,
            Exponents::PerElement(v) => v[i],
        }
    }

    /// The common exponent of every element, if there is one.
    pub fn uniform(&self) -> Option<i32> {
        match self {
            Exponents::Shared(e) => Some(*e),
            Exponents::PerElement(v) => {
                let first = *v.first()?;
                v.iter().all(|&e| e == first).then_some(first)
            }
        }
    }

    fn check_len(&self, count: usize) -> Result<()> {
        match self {
            Exponents::Shared(_) => Ok(()),
            Exponents::PerElement(v) if v.len() == count => Ok(()),
            Exponents::PerElement(_) => Err(BatchError::Invalid("exponent count differs from element count")),
        }
    }

    /// Collapses per-element exponents to `Shared` when they agree.
    fn normalized(self) -> Self {
        match self {
            Exponents::PerElement(ref v) if !v.is_empty() && v.iter().all(|&e| e == v[0]) => {
                Exponents::Shared(v[0])
            }
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CiphertextBatch {
    key: KeyId,
    shape: Shape,
    exponents: Exponents,
    payload: Vec<BigUint>,
}

impl CiphertextBatch {
    pub fn new(pk: &PublicKey, shape: Shape, exponents: Exponents, payload: Vec<BigUint>) -> Result<Self> {
        if payload.len() != shape.count() {
            return Err(BatchError::Invalid("payload length differs from shape"));
        }
        exponents.check_len(payload.len())?;
        if let Some(index) = payload.iter().position(|c| c >= pk.n_squared()) {
            return Err(BatchError::Element {
                index,
                source: PaillierError::CiphertextOutOfRange,
            });
        }
        Ok(Self {
            key: pk.id(),
            shape,
            exponents,
            payload,
        })
    }

    pub fn key(&self) -> KeyId {
        self.key
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.payload.len()
    }

    pub fn exponents(&self) -> &Exponents {
        &self.exponents
    }

    pub fn payload(&self) -> &[BigUint] {
        &self.payload
    }

    pub fn into_payload(self) -> Vec<BigUint> {
        self.payload
    }

    /// Same data viewed under a different shape of equal element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.count() != self.count() {
            return Err(BatchError::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlaintextBatch {
    key: KeyId,
    shape: Shape,
    exponents: Exponents,
    mantissas: Vec<BigUint>,
}

impl PlaintextBatch {
    pub fn new(pk: &PublicKey, shape: Shape, exponents: Exponents, mantissas: Vec<BigUint>) -> Result<Self> {
        if mantissas.len() != shape.count() {
            return Err(BatchError::Invalid("mantissa count differs from shape"));
        }
        exponents.check_len(mantissas.len())?;
        if let Some(index) = mantissas.iter().position(|m| m >= pk.n()) {
            return Err(BatchError::Element {
                index,
                source: PaillierError::PlaintextOutOfRange,
            });
        }
        Ok(Self {
            key: pk.id(),
            shape,
            exponents,
            mantissas,
        })
    }

    /// Encodes `values` with one shared exponent: `exponent` if given,
    /// otherwise the smallest natural exponent across the batch.
    pub fn encode(pk: &PublicKey, values: &[f64], shape: Shape, exponent: Option<i32>) -> Result<Self> {
        if values.len() != shape.count() {
            return Err(BatchError::Invalid("value count differs from shape"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(BatchError::Codec {
                index,
                source: CodecError::NonFinite,
            });
        }
        let exponent = exponent.unwrap_or_else(|| values.iter().map(|&v| codec::natural_exponent(v)).min().unwrap_or(0));
        let mantissas = values
            .iter()
            .enumerate()
            .map(|(index, &v)| {
                codec::encode(pk, v, Some(exponent))
                    .map(|e| e.mantissa)
                    .map_err(|source| BatchError::Codec { index, source })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            key: pk.id(),
            shape,
            exponents: Exponents::Shared(exponent),
            mantissas,
        })
    }

    /// Single-element batch holding `x` at its natural exponent.
    pub fn scalar(pk: &PublicKey, x: f64) -> Result<Self> {
        Self::encode(pk, &[x], Shape::Vector(1), None)
    }

    pub fn from_encoded(pk: &PublicKey, values: &[EncodedNumber], shape: Shape) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| v.key != pk.id()) {
            return Err(BatchError::KeyMismatch {
                expected: pk.id(),
                found: v.key,
            });
        }
        let exponents = Exponents::PerElement(values.iter().map(|v| v.exponent).collect()).normalized();
        Self::new(pk, shape, exponents, values.iter().map(|v| v.mantissa.clone()).collect())
    }

    pub fn decode(&self, pk: &PublicKey) -> Result<Vec<f64>> {
        self.decode_with(pk, &FixedPointCodec::default())
    }

    pub fn decode_with(&self, pk: &PublicKey, codec: &FixedPointCodec) -> Result<Vec<f64>> {
        check_key(pk, self.key)?;
        (0..self.count())
            .map(|index| {
                codec
                    .decode(pk, &self.element(index))
                    .map_err(|source| BatchError::Codec { index, source })
            })
            .collect()
    }

    pub fn element(&self, i: usize) -> EncodedNumber {
        EncodedNumber {
            mantissa: self.mantissas[i].clone(),
            exponent: self.exponents.at(i),
            key: self.key,
        }
    }

    pub fn key(&self) -> KeyId {
        self.key
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.mantissas.len()
    }

    pub fn exponents(&self) -> &Exponents {
        &self.exponents
    }

    pub fn mantissas(&self) -> &[BigUint] {
        &self.mantissas
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.count() != self.count() {
            return Err(BatchError::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Matrix transpose; vectors are returned unchanged.
    pub fn transpose(&self) -> Self {
        let Shape::Matrix { rows, cols } = self.shape else {
            return self.clone();
        };
        let idx = |r: usize, c: usize| r * cols + c;
        let order: Vec<usize> = (0..cols).flat_map(|c| (0..rows).map(move |r| idx(r, c))).collect();
        Self {
            key: self.key,
            shape: Shape::Matrix { rows: cols, cols: rows },
            exponents: match &self.exponents {
                Exponents::Shared(e) => Exponents::Shared(*e),
                Exponents::PerElement(v) => Exponents::PerElement(order.iter().map(|&i| v[i]).collect()),
            },
            mantissas: order.iter().map(|&i| self.mantissas[i].clone()).collect(),
        }
    }
}

pub(crate) fn check_key(pk: &PublicKey, found: KeyId) -> Result<()> {
    if found != pk.id() {
        return Err(BatchError::KeyMismatch {
            expected: pk.id(),
            found,
        });
    }
    Ok(())
}
