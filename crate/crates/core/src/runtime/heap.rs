use std::collections::BTreeMap;
use std::sync::Mutex;

use super::memory::{round_up, HEAP_BASE, HEAP_LIMIT};

#[derive(Debug, Default)]
struct State {
    top: u64,
    /// Highest `top` ever reached; addresses below it count as mapped.
    high: u64,
    /// start -> length of released ranges, coalesced.
    free: BTreeMap<u64, u64>,
    in_use: u64,
    peak: u64,
}

/// Bump allocator with a first-fit free list. Ranges come back only through
/// [`HeapAllocator::release`].
#[derive(Debug)]
pub struct HeapAllocator {
    state: Mutex<State>,
}

impl Default for HeapAllocator {
    fn default() -> Self {
        Self::new()
    }
}

impl HeapAllocator {
    pub fn new() -> Self {
        HeapAllocator {
            state: Mutex::new(State {
                top: HEAP_BASE,
                high: HEAP_BASE,
                ..State::default()
            }),
        }
    }

    /// Reserve `round_up(size)` bytes. `None` when the heap region is exhausted.
    pub fn reserve(&self, size: u64) -> Option<u64> {
        let len = round_up(size.max(1));
        let mut s = self.state.lock().unwrap();
        let hit = s.free.iter().find(|(_, l)| **l >= len).map(|(a, l)| (*a, *l));
        let start = match hit {
            Some((a, l)) => {
                s.free.remove(&a);
                if l > len {
                    s.free.insert(a + len, l - len);
                }
                a
            }
            None => {
                if s.top.checked_add(len)? > HEAP_LIMIT {
                    return None;
                }
                let a = s.top;
                s.top += len;
                s.high = s.high.max(s.top);
                a
            }
        };
        s.in_use += len;
        s.peak = s.peak.max(s.in_use);
        Some(start)
    }

    pub fn release(&self, start: u64, size: u64) {
        let len = round_up(size.max(1));
        let mut s = self.state.lock().unwrap();
        s.in_use -= len;
        let mut start = start;
        let mut len = len;
        if let Some((&a, &l)) = s.free.range(..start).next_back() {
            if a + l == start {
                s.free.remove(&a);
                start = a;
                len += l;
            }
        }
        if let Some(&l) = s.free.get(&(start + len)) {
            s.free.remove(&(start + len));
            len += l;
        }
        if start + len == s.top {
            s.top = start;
        } else {
            s.free.insert(start, len);
        }
    }

    /// Bytes reserved and not yet released, including quarantined ranges.
    pub fn in_use(&self) -> u64 {
        self.state.lock().unwrap().in_use
    }

    pub fn peak(&self) -> u64 {
        self.state.lock().unwrap().peak
    }

    pub fn top(&self) -> u64 {
        self.state.lock().unwrap().top
    }

    pub fn high_water(&self) -> u64 {
        self.state.lock().unwrap().high
    }
}
