//! Host-side storage: a reusable buffer pool, the batch wire format, and
//! mini-batch aggregation.

pub mod aggregate;
pub mod pool;
pub mod wire;

pub use aggregate::{pack, AggregateError, AggregatedBatch, MinibatchAggregator, Row};
pub use pool::{BufferHandle, BufferPool, BufferRecord, PoolError, PoolStats, DEFAULT_CAPACITY_BYTES};
pub use wire::{SerializedBatch, WireError};
