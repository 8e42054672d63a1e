use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::batch::{BatchError, PlaintextBatch, Shape};
use crate::paillier::PublicKey;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("mini-batch {0} has no rows")]
    Empty(u64),
    #[error("row {row} has {found} features, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("mini-batch {0} was cached with different rows")]
    StaleId(u64),
    #[error(transparent)]
    Batch(#[from] BatchError),
}

/// One training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: f64,
}

/// A mini-batch packed into a row-major feature matrix and a label vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatedBatch {
    pub batch_id: u64,
    pub ids: Vec<u64>,
    pub features: PlaintextBatch,
    pub labels: PlaintextBatch,
}

impl AggregatedBatch {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.features.shape().as_matrix().1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggregatorStats {
    pub encodes: u64,
    pub cache_hits: u64,
}

/// Packs mini-batches once and hands out the cached result on every later
/// request for the same batch id.
pub struct MinibatchAggregator {
    pk: PublicKey,
    exponent: i32,
    cache: Mutex<HashMap<u64, Arc<AggregatedBatch>>>,
    stats: Mutex<AggregatorStats>,
}

impl MinibatchAggregator {
    /// Features and labels are encoded with the shared `exponent`.
    pub fn new(pk: PublicKey, exponent: i32) -> Self {
        Self {
            pk,
            exponent,
            cache: Mutex::new(HashMap::new()),
            stats: Mutex::new(AggregatorStats::default()),
        }
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn aggregate(&self, batch_id: u64, rows: &[Row]) -> Result<Arc<AggregatedBatch>, AggregateError> {
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(hit) = cache.get(&batch_id) {
            if hit.ids.len() != rows.len() || hit.ids.iter().zip(rows).any(|(&id, r)| id != r.id) {
                return Err(AggregateError::StaleId(batch_id));
            }
            self.stats.lock().unwrap_or_else(|e| e.into_inner()).cache_hits += 1;
            return Ok(Arc::clone(hit));
        }
        let packed = Arc::new(pack(&self.pk, batch_id, rows, self.exponent)?);
        cache.insert(batch_id, Arc::clone(&packed));
        self.stats.lock().unwrap_or_else(|e| e.into_inner()).encodes += 1;
        Ok(packed)
    }

    pub fn stats(&self) -> AggregatorStats {
        *self.stats.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn clear(&self) {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

/// Uncached packing of `rows`.
pub fn pack(pk: &PublicKey, batch_id: u64, rows: &[Row], exponent: i32) -> Result<AggregatedBatch, AggregateError> {
    let first = rows.first().ok_or(AggregateError::Empty(batch_id))?;
    let width = first.features.len();
    if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.features.len() != width) {
        return Err(AggregateError::Ragged {
            row,
            expected: width,
            found: r.features.len(),
        });
    }
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.features.iter().copied()).collect();
    let labels: Vec<f64> = rows.iter().map(|r| r.label).collect();
    Ok(AggregatedBatch {
        batch_id,
        ids: rows.iter().map(|r| r.id).collect(),
        features: PlaintextBatch::encode(
            pk,
            &flat,
            Shape::Matrix {
                rows: rows.len(),
                cols: width,
            },
            Some(exponent),
        )?,
        labels: PlaintextBatch::encode(pk, &labels, Shape::Vector(rows.len()), Some(exponent))?,
    })
}
