//! First-fit sub-allocator over one domain's pool.
//!
//! All bookkeeping lives here, outside the pool, so the full `pages * 4096`
//! bytes are usable and none of it is reachable through a domain grant.

use std::collections::{BTreeMap, HashMap};
use std::mem::size_of;

use thiserror::Error;

/// Every allocation starts on, and reserves a multiple of, this many bytes.
pub const ALLOC_ALIGN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    pub offset: usize,
    /// Bytes requested by the caller.
    pub size: usize,
    /// Bytes taken from the free list (`size` rounded up to [`ALLOC_ALIGN`]).
    pub reserved: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("allocation size must be greater than zero")]
    BadSize,
    #[error("pool exhausted")]
    Exhausted,
    #[error("unknown allocation id")]
    Unknown,
    #[error("allocation already freed")]
    DoubleFree,
}

#[derive(Debug, Clone)]
pub struct PoolAllocator {
    capacity: usize,
    /// offset -> length, coalesced, sorted by offset.
    free: BTreeMap<usize, usize>,
    live: HashMap<u64, Extent>,
    next_id: u64,
    in_use: usize,
    high_water: usize,
    peak_bookkeeping: usize,
}

fn round_up(n: usize) -> usize {
    n.div_ceil(ALLOC_ALIGN) * ALLOC_ALIGN
}

impl PoolAllocator {
    pub fn new(capacity: usize) -> Self {
        assert_eq!(capacity % ALLOC_ALIGN, 0, "pool capacity must be aligned");
        let mut free = BTreeMap::new();
        if capacity > 0 {
            free.insert(0, capacity);
        }
        let mut a = PoolAllocator {
            capacity,
            free,
            live: HashMap::new(),
            next_id: 0,
            in_use: 0,
            high_water: 0,
            peak_bookkeeping: 0,
        };
        a.peak_bookkeeping = a.bookkeeping_bytes();
        a
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Sum of requested sizes of live allocations.
    pub fn in_use(&self) -> usize {
        self.in_use
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Returns the id and extent of a fresh allocation at the lowest offset
    /// that fits.
    pub fn alloc(&mut self, size: usize) -> Result<(u64, Extent), AllocError> {
        if size == 0 {
            return Err(AllocError::BadSize);
        }
        let reserved = round_up(size);
        let (&offset, &len) = self
            .free
            .iter()
            .find(|(_, &len)| len >= reserved)
            .ok_or(AllocError::Exhausted)?;
        self.free.remove(&offset);
        if len > reserved {
            self.free.insert(offset + reserved, len - reserved);
        }
        let id = self.next_id;
        self.next_id += 1;
        let extent = Extent {
            offset,
            size,
            reserved,
        };
        self.live.insert(id, extent);
        self.in_use += size;
        self.high_water = self.high_water.max(self.in_use);
        self.peak_bookkeeping = self.peak_bookkeeping.max(self.bookkeeping_bytes());
        Ok((id, extent))
    }

    pub fn free(&mut self, id: u64) -> Result<Extent, AllocError> {
        let extent = match self.live.remove(&id) {
            Some(e) => e,
            None if id < self.next_id => return Err(AllocError::DoubleFree),
            None => return Err(AllocError::Unknown),
        };
        self.in_use -= extent.size;
        let mut start = extent.offset;
        let mut len = extent.reserved;
        if let Some((&prev, &prev_len)) = self.free.range(..start).next_back() {
            if prev + prev_len == start {
                self.free.remove(&prev);
                start = prev;
                len += prev_len;
            }
        }
        if let Some(next_len) = self.free.remove(&(start + len)) {
            len += next_len;
        }
        self.free.insert(start, len);
        Ok(extent)
    }

    pub fn get(&self, id: u64) -> Option<Extent> {
        self.live.get(&id).copied()
    }

    /// Live allocation containing pool offset `offset`, if any.
    pub fn find(&self, offset: usize) -> Option<(u64, Extent)> {
        self.live
            .iter()
            .find(|(_, e)| offset >= e.offset && offset < e.offset + e.size)
            .map(|(&id, &e)| (id, e))
    }

    /// Free extents as `(offset, len)`, sorted by offset.
    pub fn free_extents(&self) -> Vec<(usize, usize)> {
        self.free.iter().map(|(&o, &l)| (o, l)).collect()
    }

    /// Bytes of allocator state currently held in monitor memory.
    pub fn bookkeeping_bytes(&self) -> usize {
        size_of::<Self>()
            + self.free.len() * size_of::<(usize, usize)>()
            + self.live.len() * size_of::<(u64, Extent)>()
    }

    pub fn peak_bookkeeping_bytes(&self) -> usize {
        self.peak_bookkeeping
    }
}
