//! Interpreter and instrumented memory model.
//!
//! [`Runtime`] holds everything the application threads and the sweeper
//! share: cell memory, the heap allocator, the allocation registry, the
//! dedicated stacks, the global pointer array and the metadata tables. The
//! allocation, free and frame hooks live here; [`run`] drives a module.

pub mod heap;
mod interp;
pub mod memory;
pub mod registry;
mod report;
pub mod stack;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_channel::{Receiver, Sender};

pub use interp::{run, run_with_observer, Observer, Target};
pub use memory::Memory;
pub use registry::{AllocationRegistry, RuntimeObjectRecord};
pub use report::{ExecutionReport, Fault, StaleAccess, Trap, TrapKind};
pub use stack::{DedicatedStacks, FrameSlot, StackError};

use crate::ir::Module;
use crate::metadata::ObjectPointerTable;
use heap::HeapAllocator;
use memory::{round_up, GLOBAL_BASE, GLOBAL_LIMIT};

/// Messages from application threads to the sweeper.
#[derive(Debug)]
pub enum SweeperEvent {
    Alloc(RuntimeObjectRecord),
    /// `ack`, when present, is signalled once the object's dangling
    /// pointers are nullified and its memory released.
    Free {
        record: RuntimeObjectRecord,
        ack: Option<Sender<()>>,
    },
    FrameExit {
        function_id: u32,
        token: u64,
    },
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuntimeConfig {
    /// Defer frees to the sweeper and maintain the dedicated stack.
    pub protected: bool,
    /// Place stack pointer slots on the dedicated stack (protected only).
    pub stack_protection: bool,
    /// Block each free until the sweeper has processed it.
    pub sync_sweep: bool,
    /// Snapshot memory around every sweep and count cells changed outside
    /// the freed range. Meaningful only with `sync_sweep` and one thread.
    pub audit: bool,
    pub threads: usize,
    pub step_limit: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            protected: true,
            stack_protection: true,
            sync_sweep: false,
            audit: false,
            threads: 1,
            step_limit: 50_000_000,
        }
    }
}

impl RuntimeConfig {
    pub fn unprotected() -> Self {
        RuntimeConfig {
            protected: false,
            stack_protection: false,
            ..Default::default()
        }
    }

    pub fn dedicated_frames(&self) -> bool {
        self.protected && self.stack_protection
    }
}

#[derive(Debug, Default)]
pub(crate) struct Counters {
    pub allocs: AtomicU64,
    pub frees: AtomicU64,
    pub registry_overlaps: AtomicU64,
    pub quarantine_violations: AtomicU64,
    pub events_sent: AtomicU64,
}

/// State shared by application threads and the sweeper.
pub struct Runtime {
    pub config: RuntimeConfig,
    pub memory: Memory,
    pub heap: HeapAllocator,
    pub registry: AllocationRegistry,
    pub stacks: DedicatedStacks,
    pub metadata: Arc<ObjectPointerTable>,
    /// Address of each global, by global index.
    pub globals: Vec<u64>,
    globals_end: u64,
    events: Option<Sender<SweeperEvent>>,
    /// start -> reserved length of freed ranges not yet released.
    quarantine: Mutex<BTreeMap<u64, u64>>,
    faults: Mutex<Vec<Fault>>,
    pub(crate) counters: Counters,
}

/// Lay globals out in declaration order from the global base and return
/// the address of each global by index.
pub fn register_globals(module: &Module, index_map: &BTreeMap<String, u32>) -> Vec<u64> {
    let mut addrs = vec![0; index_map.len()];
    let mut next = GLOBAL_BASE;
    for g in &module.globals {
        addrs[index_map[&g.name] as usize] = next;
        next += round_up(module.types.get(g.ty).size.max(1));
    }
    addrs
}

impl Runtime {
    /// Returns the runtime and, in protected mode, the sweeper's end of the
    /// event queue.
    pub fn new(
        metadata: Arc<ObjectPointerTable>,
        globals: Vec<u64>,
        config: RuntimeConfig,
    ) -> (Runtime, Option<Receiver<SweeperEvent>>) {
        assert!(config.threads >= 1 && config.threads <= memory::MAX_THREADS, "thread count out of range");
        let globals_end = globals
            .iter()
            .zip(&metadata.globals)
            .map(|(a, g)| a + round_up(g.size.max(1)))
            .max()
            .unwrap_or(GLOBAL_BASE);
        assert!(globals_end <= GLOBAL_LIMIT, "globals do not fit");
        let (tx, rx) = if config.protected {
            let (tx, rx) = crossbeam_channel::unbounded();
            (Some(tx), Some(rx))
        } else {
            (None, None)
        };
        let rt = Runtime {
            config,
            memory: Memory::new(),
            heap: HeapAllocator::new(),
            registry: AllocationRegistry::new(),
            stacks: DedicatedStacks::new(config.threads),
            metadata,
            globals,
            globals_end,
            events: tx,
            quarantine: Mutex::new(BTreeMap::new()),
            faults: Mutex::new(Vec::new()),
            counters: Counters::default(),
        };
        (rt, rx)
    }

    pub fn globals_end(&self) -> u64 {
        self.globals_end
    }

    fn send(&self, e: SweeperEvent) {
        if let Some(tx) = &self.events {
            self.counters.events_sent.fetch_add(1, Ordering::Relaxed);
            // The sweeper outlives every producer; a send can only fail
            // after it has been torn down.
            let _ = tx.send(e);
        }
    }

    pub fn shutdown(&self) {
        self.send(SweeperEvent::Shutdown);
    }

    pub(crate) fn fault(&self, f: Fault) {
        self.faults.lock().unwrap().push(f);
    }

    pub fn faults(&self) -> Vec<Fault> {
        self.faults.lock().unwrap().clone()
    }

    /// Reserve and register a zeroed object for static heap object `site`.
    pub fn on_alloc(&self, site: u32, size: u64) -> Result<u64, TrapKind> {
        if size == 0 {
            return Err(TrapKind::ZeroSizeAlloc);
        }
        let start = self.heap.reserve(size).ok_or(TrapKind::OutOfMemory)?;
        let len = round_up(size);
        {
            let q = self.quarantine.lock().unwrap();
            if let Some((a, l)) = q.range(..start + len).next_back() {
                if a + l > start {
                    self.counters.quarantine_violations.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        self.memory.zero(start, len);
        let rec = RuntimeObjectRecord {
            start,
            end: start + size,
            size,
            static_id: site,
        };
        if !self.registry.insert(rec) {
            self.counters.registry_overlaps.fetch_add(1, Ordering::Relaxed);
        }
        self.counters.allocs.fetch_add(1, Ordering::Relaxed);
        self.send(SweeperEvent::Alloc(rec));
        Ok(start)
    }

    /// Free the object starting at `addr`. Protected mode hands the object to
    /// the sweeper; its memory stays reserved until the sweeper releases it.
    pub fn on_free(&self, thread: usize, addr: u64) -> Result<(), Fault> {
        if addr == 0 {
            return Ok(());
        }
        let Some(record) = self.registry.remove(addr) else {
            let f = if (memory::HEAP_BASE..self.heap.high_water()).contains(&addr) {
                Fault::DoubleFree { thread, addr }
            } else {
                Fault::InvalidFree { thread, addr }
            };
            self.fault(f.clone());
            return Err(f);
        };
        self.counters.frees.fetch_add(1, Ordering::Relaxed);
        if !self.config.protected {
            self.heap.release(record.start, record.size);
            return Ok(());
        }
        self.quarantine.lock().unwrap().insert(record.start, round_up(record.size));
        if self.config.sync_sweep {
            let (ack_tx, ack_rx) = crossbeam_channel::bounded(1);
            self.send(SweeperEvent::Free {
                record,
                ack: Some(ack_tx),
            });
            let _ = ack_rx.recv();
        } else {
            self.send(SweeperEvent::Free { record, ack: None });
        }
        Ok(())
    }

    /// Called by the sweeper once a freed object's pointers are nullified.
    pub fn release_quarantined(&self, record: &RuntimeObjectRecord) {
        self.quarantine.lock().unwrap().remove(&record.start);
        self.heap.release(record.start, record.size);
    }

    pub fn quarantined(&self) -> usize {
        self.quarantine.lock().unwrap().len()
    }

    pub fn on_frame_enter(&self, thread: usize, function_id: u32, slot_sizes: &[u64]) -> Result<(u64, Vec<FrameSlot>), StackError> {
        self.stacks.enter(&self.memory, thread, function_id, slot_sizes)
    }

    pub fn on_frame_exit(&self, thread: usize, function_id: u32, token: u64) -> Result<(), Fault> {
        match self.stacks.exit(thread, token) {
            Ok(()) => {
                self.send(SweeperEvent::FrameExit { function_id, token });
                Ok(())
            }
            Err(_) => {
                let f = Fault::FrameExit { thread, token };
                self.fault(f.clone());
                Err(f)
            }
        }
    }

    pub fn allocs(&self) -> u64 {
        self.counters.allocs.load(Ordering::Relaxed)
    }

    pub fn frees(&self) -> u64 {
        self.counters.frees.load(Ordering::Relaxed)
    }

    pub fn registry_overlaps(&self) -> u64 {
        self.counters.registry_overlaps.load(Ordering::Relaxed)
    }

    pub fn quarantine_violations(&self) -> u64 {
        self.counters.quarantine_violations.load(Ordering::Relaxed)
    }

    pub fn events_sent(&self) -> u64 {
        self.counters.events_sent.load(Ordering::Relaxed)
    }
}

/// Name -> address of each global.
pub(crate) fn global_addresses(module: &Module, rt: &Runtime) -> HashMap<String, u64> {
    module
        .globals
        .iter()
        .map(|g| {
            let i = rt.metadata.global_index(&g.name).expect("global in metadata");
            (g.name.clone(), rt.globals[i as usize])
        })
        .collect()
}
