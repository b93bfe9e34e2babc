use std::ops::Bound;

use crossbeam_skiplist::SkipMap;
use serde::Serialize;

/// A live runtime object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RuntimeObjectRecord {
    pub start: u64,
    /// Exclusive.
    pub end: u64,
    pub size: u64,
    pub static_id: u32,
}

impl RuntimeObjectRecord {
    pub fn contains(&self, addr: u64) -> bool {
        (self.start..self.end).contains(&addr)
    }
}

/// Concurrent map from start address to live record.
#[derive(Default)]
pub struct AllocationRegistry {
    map: SkipMap<u64, RuntimeObjectRecord>,
}

impl AllocationRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a record; returns false if it overlaps a live neighbour.
    pub fn insert(&self, rec: RuntimeObjectRecord) -> bool {
        let below = self.map.upper_bound(Bound::Included(&rec.start));
        let above = self.map.lower_bound(Bound::Included(&rec.start));
        let clash = below.is_some_and(|e| e.value().end > rec.start) || above.is_some_and(|e| *e.key() < rec.end);
        self.map.insert(rec.start, rec);
        !clash
    }

    pub fn remove(&self, start: u64) -> Option<RuntimeObjectRecord> {
        self.map.remove(&start).map(|e| *e.value())
    }

    /// The live record with `start <= addr < end`.
    pub fn lookup(&self, addr: u64) -> Option<RuntimeObjectRecord> {
        let e = self.map.upper_bound(Bound::Included(&addr))?;
        let r = *e.value();
        r.contains(addr).then_some(r)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn snapshot(&self) -> Vec<RuntimeObjectRecord> {
        self.map.iter().map(|e| *e.value()).collect()
    }
}
