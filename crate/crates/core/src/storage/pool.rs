use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_CAPACITY_BYTES: u64 = 1 << 30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("buffer size must be positive")]
    ZeroSize,
    #[error("could not allocate {0} bytes")]
    AllocationFailed(usize),
    #[error("buffer {0} is not registered with this pool")]
    UnknownBuffer(u64),
    #[error("buffer {0} is already free")]
    DoubleFree(u64),
    #[error("buffer {0} is not in use")]
    NotInUse(u64),
}

/// A registered buffer as seen by its user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferHandle {
    pub id: u64,
    pub size_bytes: usize,
    /// Opaque location: cumulative bytes allocated before this buffer.
    pub offset: u64,
}

/// One row of the pool's table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferRecord {
    pub handle: BufferHandle,
    pub available: bool,
    pub last_used: u64,
    pub reuse_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    pub fresh_allocations: u64,
    pub reuse_hits: u64,
    pub frees: u64,
    pub evictions: u64,
    pub retained_bytes: u64,
    pub available_bytes: u64,
    pub outstanding: u64,
}

struct Entry {
    record: BufferRecord,
    data: Arc<Mutex<Vec<u8>>>,
}

struct State {
    capacity_bytes: u64,
    tick: u64,
    next_id: u64,
    next_offset: u64,
    entries: HashMap<u64, Entry>,
    /// size class → free buffer ids
    free_index: BTreeMap<usize, Vec<u64>>,
    stats: PoolStats,
}

/// Size-indexed pool of reusable byte buffers with LRU eviction.
///
/// A buffer of exactly the requested size is reused when one is free.
/// Whenever retained bytes exceed the capacity, free buffers are evicted in
/// ascending `last_used` order; buffers in use are never evicted.
pub struct BufferPool {
    state: Mutex<State>,
}

impl Default for BufferPool {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY_BYTES)
    }
}

impl BufferPool {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            state: Mutex::new(State {
                capacity_bytes,
                tick: 0,
                next_id: 0,
                next_offset: 0,
                entries: HashMap::new(),
                free_index: BTreeMap::new(),
                stats: PoolStats::default(),
            }),
        }
    }

    /// A pool that never evicts.
    pub fn unbounded() -> Self {
        Self::new(u64::MAX)
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.lock().capacity_bytes
    }

    pub fn set_capacity_bytes(&self, capacity_bytes: u64) -> Vec<u64> {
        let mut s = self.lock();
        s.capacity_bytes = capacity_bytes;
        s.gc(0)
    }

    pub fn alloc(&self, size_bytes: usize) -> Result<BufferHandle, PoolError> {
        if size_bytes == 0 {
            return Err(PoolError::ZeroSize);
        }
        let mut s = self.lock();
        s.tick += 1;
        let tick = s.tick;
        if let Some(id) = s.free_index.get_mut(&size_bytes).and_then(Vec::pop) {
            let entry = s.entries.get_mut(&id).expect("indexed buffer is registered");
            entry.record.available = false;
            entry.record.last_used = tick;
            entry.record.reuse_count += 1;
            let handle = entry.record.handle;
            s.stats.reuse_hits += 1;
            s.stats.available_bytes -= size_bytes as u64;
            s.stats.outstanding += 1;
            return Ok(handle);
        }
        s.gc(size_bytes as u64);
        let mut data = Vec::new();
        data.try_reserve_exact(size_bytes)
            .map_err(|_| PoolError::AllocationFailed(size_bytes))?;
        data.resize(size_bytes, 0);
        let handle = BufferHandle {
            id: s.next_id,
            size_bytes,
            offset: s.next_offset,
        };
        s.next_id += 1;
        s.next_offset += size_bytes as u64;
        s.entries.insert(
            handle.id,
            Entry {
                record: BufferRecord {
                    handle,
                    available: false,
                    last_used: tick,
                    reuse_count: 0,
                },
                data: Arc::new(Mutex::new(data)),
            },
        );
        s.stats.fresh_allocations += 1;
        s.stats.retained_bytes += size_bytes as u64;
        s.stats.outstanding += 1;
        Ok(handle)
    }

    /// Marks the buffer available. Contents are kept until eviction.
    pub fn free(&self, handle: BufferHandle) -> Result<(), PoolError> {
        let mut s = self.lock();
        s.tick += 1;
        let tick = s.tick;
        let entry = s
            .entries
            .get_mut(&handle.id)
            .filter(|e| e.record.handle == handle)
            .ok_or(PoolError::UnknownBuffer(handle.id))?;
        if entry.record.available {
            return Err(PoolError::DoubleFree(handle.id));
        }
        entry.record.available = true;
        entry.record.last_used = tick;
        s.free_index.entry(handle.size_bytes).or_default().push(handle.id);
        s.stats.frees += 1;
        s.stats.available_bytes += handle.size_bytes as u64;
        s.stats.outstanding -= 1;
        s.gc(0);
        Ok(())
    }

    /// Evicts free buffers, least recently used first, until retained bytes
    /// fit the capacity. Returns the evicted ids in eviction order.
    pub fn gc(&self) -> Vec<u64> {
        self.lock().gc(0)
    }

    /// Runs `f` on the contents of an outstanding buffer.
    pub fn with_buffer<T>(&self, handle: BufferHandle, f: impl FnOnce(&mut [u8]) -> T) -> Result<T, PoolError> {
        let data = {
            let s = self.lock();
            let entry = s
                .entries
                .get(&handle.id)
                .filter(|e| e.record.handle == handle)
                .ok_or(PoolError::UnknownBuffer(handle.id))?;
            if entry.record.available {
                return Err(PoolError::NotInUse(handle.id));
            }
            Arc::clone(&entry.data)
        };
        let mut guard = data.lock().unwrap_or_else(|e| e.into_inner());
        Ok(f(&mut guard))
    }

    pub fn stats(&self) -> PoolStats {
        self.lock().stats
    }

    pub fn record(&self, id: u64) -> Option<BufferRecord> {
        self.lock().entries.get(&id).map(|e| e.record.clone())
    }

    /// Snapshot of the table ordered by id.
    pub fn table(&self) -> Vec<BufferRecord> {
        let s = self.lock();
        let mut rows: Vec<_> = s.entries.values().map(|e| e.record.clone()).collect();
        rows.sort_by_key(|r| r.handle.id);
        rows
    }
}

impl State {
    /// Evicts until `retained + incoming ≤ capacity` or nothing is free.
    fn gc(&mut self, incoming: u64) -> Vec<u64> {
        let mut evicted = Vec::new();
        if self.stats.retained_bytes.saturating_add(incoming) <= self.capacity_bytes {
            return evicted;
        }
        let mut candidates: Vec<(u64, u64)> = self
            .entries
            .values()
            .filter(|e| e.record.available)
            .map(|e| (e.record.last_used, e.record.handle.id))
            .collect();
        candidates.sort_unstable();
        for (_, id) in candidates {
            if self.stats.retained_bytes.saturating_add(incoming) <= self.capacity_bytes {
                break;
            }
            let entry = self.entries.remove(&id).expect("candidate is registered");
            let size = entry.record.handle.size_bytes;
            if let Some(list) = self.free_index.get_mut(&size) {
                list.retain(|&x| x != id);
                if list.is_empty() {
                    self.free_index.remove(&size);
                }
            }
            self.stats.retained_bytes -= size as u64;
            self.stats.available_bytes -= size as u64;
            self.stats.evictions += 1;
            evicted.push(id);
        }
        evicted
    }
}
