//! Simulated 64-bit address space made of 8-byte atomic cells.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

pub const WORD: u64 = 8;

/// Accesses below this address count as null dereferences.
pub const NULL_PAGE: u64 = 0x1000;
pub const GLOBAL_BASE: u64 = 0x0001_0000;
pub const GLOBAL_LIMIT: u64 = 0x0100_0000;
pub const HEAP_BASE: u64 = 0x1000_0000;
pub const HEAP_LIMIT: u64 = 0x4000_0000;
pub const NATIVE_STACK_BASE: u64 = 0x4000_0000;
pub const DEDICATED_STACK_BASE: u64 = 0x6000_0000;
/// Bytes of native or dedicated stack per logical thread.
pub const STACK_REGION: u64 = 0x0100_0000;
pub const MAX_THREADS: usize = 16;
/// Function values live here; the region is never mapped.
pub const FUNCTION_BASE: u64 = 0x7000_0000;
pub const FUNCTION_STRIDE: u64 = 16;

const SPACE_END: u64 = 0x7000_0000;
const SEGMENT_WORDS: usize = 8192;
const SEGMENT_BYTES: u64 = SEGMENT_WORDS as u64 * WORD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Region {
    Global,
    Heap,
    NativeStack(usize),
    DedicatedStack(usize),
}

pub fn region_of(addr: u64) -> Option<Region> {
    match addr {
        GLOBAL_BASE..GLOBAL_LIMIT => Some(Region::Global),
        HEAP_BASE..HEAP_LIMIT => Some(Region::Heap),
        NATIVE_STACK_BASE..DEDICATED_STACK_BASE => {
            let t = ((addr - NATIVE_STACK_BASE) / STACK_REGION) as usize;
            (t < MAX_THREADS).then_some(Region::NativeStack(t))
        }
        DEDICATED_STACK_BASE..SPACE_END => {
            let t = ((addr - DEDICATED_STACK_BASE) / STACK_REGION) as usize;
            (t < MAX_THREADS).then_some(Region::DedicatedStack(t))
        }
        _ => None,
    }
}

/// Cell storage, allocated one segment at a time on first touch. Mapping
/// policy (which addresses are valid) is decided by the caller.
pub struct Memory {
    segments: Vec<OnceLock<Box<[AtomicU64]>>>,
}

impl Default for Memory {
    fn default() -> Self {
        Self::new()
    }
}

impl Memory {
    pub fn new() -> Self {
        let n = (SPACE_END / SEGMENT_BYTES) as usize;
        Memory {
            segments: (0..n).map(|_| OnceLock::new()).collect(),
        }
    }

    fn cell(&self, addr: u64) -> &AtomicU64 {
        debug_assert!(addr % WORD == 0 && addr < SPACE_END);
        let seg = (addr / SEGMENT_BYTES) as usize;
        let words = self.segments[seg].get_or_init(|| (0..SEGMENT_WORDS).map(|_| AtomicU64::new(0)).collect());
        &words[((addr % SEGMENT_BYTES) / WORD) as usize]
    }

    fn touched(&self, addr: u64) -> Option<&AtomicU64> {
        let seg = self.segments.get((addr / SEGMENT_BYTES) as usize)?;
        seg.get().map(|w| &w[((addr % SEGMENT_BYTES) / WORD) as usize])
    }

    pub fn load(&self, addr: u64) -> u64 {
        match self.touched(addr) {
            Some(c) => c.load(Ordering::SeqCst),
            None => 0,
        }
    }

    pub fn store(&self, addr: u64, value: u64) {
        self.cell(addr).store(value, Ordering::SeqCst);
    }

    /// Atomically replace `current` with `new`; false if the cell changed.
    pub fn compare_exchange(&self, addr: u64, current: u64, new: u64) -> bool {
        self.cell(addr)
            .compare_exchange(current, new, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    pub fn zero(&self, start: u64, len: u64) {
        let mut a = start;
        while a < start + len {
            if let Some(c) = self.touched(a) {
                c.store(0, Ordering::SeqCst);
            }
            a += WORD;
        }
    }

    /// All non-zero cells.
    pub fn snapshot(&self) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for (i, seg) in self.segments.iter().enumerate() {
            let Some(words) = seg.get() else { continue };
            for (j, w) in words.iter().enumerate() {
                let v = w.load(Ordering::SeqCst);
                if v != 0 {
                    out.insert(i as u64 * SEGMENT_BYTES + j as u64 * WORD, v);
                }
            }
        }
        out
    }
}

pub fn round_up(n: u64) -> u64 {
    n.div_ceil(WORD) * WORD
}
