//! The sweeper thread: consumes allocation, free and frame-exit events,
//! nullifies dangling pointers recorded in the metadata tables, releases
//! quarantined memory and reclaims dedicated-stack frames.

use std::collections::{BTreeMap, HashMap};

use crossbeam_channel::Receiver;
use serde::Serialize;

use crate::metadata::{StaticPointerRecord, ANY_POINTER_FIELD};
use crate::runtime::memory::{round_up, WORD};
use crate::runtime::{Runtime, RuntimeObjectRecord, SweeperEvent};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SweepReport {
    pub events: u64,
    pub allocs_seen: u64,
    pub frees_processed: u64,
    pub frame_exits: u64,
    pub nullified_heap: u64,
    pub nullified_global: u64,
    pub nullified_stack: u64,
    pub released_bytes: u64,
    pub frames_reclaimed: u64,
    pub cells_scanned: u64,
    pub stack_slots_scanned: u64,
    /// Frame exits whose token was unknown.
    pub unknown_frames: u64,
    /// Records naming a global index or container outside the tables.
    pub config_errors: u64,
    /// Audit mode: cells a sweep changed although they did not point into
    /// the freed range.
    pub interference_violations: u64,
    /// Audit mode: covered cells still pointing into the freed range after
    /// the sweep.
    pub nullity_violations: u64,
}

impl SweepReport {
    pub fn nullified(&self) -> u64 {
        self.nullified_heap + self.nullified_global + self.nullified_stack
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Heap,
    Global,
    Stack,
}

/// Live runtime objects grouped by static id.
#[derive(Debug, Default)]
pub struct StaticGrouping {
    groups: HashMap<u32, BTreeMap<u64, RuntimeObjectRecord>>,
}

impl StaticGrouping {
    pub fn insert(&mut self, r: RuntimeObjectRecord) {
        self.groups.entry(r.static_id).or_default().insert(r.start, r);
    }

    pub fn remove(&mut self, r: &RuntimeObjectRecord) {
        if let Some(g) = self.groups.get_mut(&r.static_id) {
            g.remove(&r.start);
        }
    }

    pub fn live(&self, static_id: u32) -> impl Iterator<Item = &RuntimeObjectRecord> {
        self.groups.get(&static_id).into_iter().flat_map(|g| g.values())
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Sweeper<'r> {
    rt: &'r Runtime,
    grouping: StaticGrouping,
    report: SweepReport,
}

impl<'r> Sweeper<'r> {
    pub fn new(rt: &'r Runtime) -> Self {
        Sweeper {
            rt,
            grouping: StaticGrouping::default(),
            report: SweepReport::default(),
        }
    }

    pub fn grouping(&self) -> &StaticGrouping {
        &self.grouping
    }

    pub fn report(&self) -> &SweepReport {
        &self.report
    }

    /// Handle one event; false on shutdown.
    pub fn handle(&mut self, e: SweeperEvent) -> bool {
        self.report.events += 1;
        match e {
            SweeperEvent::Alloc(r) => {
                self.report.allocs_seen += 1;
                self.grouping.insert(r);
            }
            SweeperEvent::Free { record, ack } => {
                self.handle_free(&record);
                if let Some(ack) = ack {
                    let _ = ack.send(());
                }
            }
            SweeperEvent::FrameExit { token, .. } => self.handle_frame_exit(token),
            SweeperEvent::Shutdown => return false,
        }
        true
    }

    /// Every cell the metadata of `static_id` covers, with its class.
    fn covered_cells(&mut self, static_id: u32) -> Vec<(u64, Class)> {
        let rt = self.rt;
        let mut cells = Vec::new();
        for rec in rt.metadata.records(static_id) {
            match *rec {
                StaticPointerRecord::HeapField { container, offset } => {
                    if !rt.metadata.objects.contains_key(&container) {
                        self.report.config_errors += 1;
                        continue;
                    }
                    for r in self.grouping.live(container) {
                        let reserved = round_up(r.size);
                        if offset == ANY_POINTER_FIELD {
                            for off in rt.metadata.expand_any(container, r.size) {
                                cells.push((r.start + off, Class::Heap));
                            }
                        } else if (offset as u64) < reserved {
                            cells.push((r.start + offset as u64 - offset as u64 % WORD, Class::Heap));
                        }
                    }
                }
                StaticPointerRecord::Global { index } => {
                    let (Some(addr), Some(g)) = (rt.globals.get(index as usize), rt.metadata.globals.get(index as usize)) else {
                        self.report.config_errors += 1;
                        continue;
                    };
                    for i in 0..round_up(g.size.max(1)) / WORD {
                        cells.push((addr + i * WORD, Class::Global));
                    }
                }
                StaticPointerRecord::Stack { function_id, slot_id } => {
                    for slot in rt.stacks.live_slots(function_id, slot_id) {
                        self.report.stack_slots_scanned += 1;
                        for i in 0..round_up(slot.size.max(1)) / WORD {
                            cells.push((slot.addr + i * WORD, Class::Stack));
                        }
                    }
                }
            }
        }
        cells.sort_unstable_by_key(|c| c.0);
        cells.dedup_by_key(|c| c.0);
        cells
    }

    /// Nullify every covered cell pointing into `record`, then release it.
    pub fn handle_free(&mut self, record: &RuntimeObjectRecord) {
        self.report.frees_processed += 1;
        self.grouping.remove(record);
        let rt = self.rt;
        let before = rt.config.audit.then(|| rt.memory.snapshot());
        let cells = self.covered_cells(record.static_id);
        for &(addr, class) in &cells {
            self.report.cells_scanned += 1;
            let v = rt.memory.load(addr);
            if record.contains(v) && rt.memory.compare_exchange(addr, v, 0) {
                match class {
                    Class::Heap => self.report.nullified_heap += 1,
                    Class::Global => self.report.nullified_global += 1,
                    Class::Stack => self.report.nullified_stack += 1,
                }
            }
        }
        if let Some(before) = before {
            let after = rt.memory.snapshot();
            for (addr, old) in &before {
                let new = after.get(addr).copied().unwrap_or(0);
                if new != *old && !(record.contains(*old) && new == 0) {
                    self.report.interference_violations += 1;
                }
            }
            for addr in after.keys() {
                if !before.contains_key(addr) {
                    self.report.interference_violations += 1;
                }
            }
            for &(addr, _) in &cells {
                if record.contains(rt.memory.load(addr)) {
                    self.report.nullity_violations += 1;
                }
            }
        }
        rt.release_quarantined(record);
        self.report.released_bytes += round_up(record.size);
    }

    pub fn handle_frame_exit(&mut self, token: u64) {
        self.report.frame_exits += 1;
        match self.rt.stacks.release(token) {
            Ok(_) => self.report.frames_reclaimed += 1,
            Err(_) => self.report.unknown_frames += 1,
        }
    }

    pub fn finish(self) -> SweepReport {
        self.report
    }
}

/// Consume events until shutdown or disconnection.
pub fn run_sweeper(rt: &Runtime, rx: Receiver<SweeperEvent>) -> SweepReport {
    let mut s = Sweeper::new(rt);
    while let Ok(e) = rx.recv() {
        if !s.handle(e) {
            break;
        }
    }
    // Drain anything a late producer managed to enqueue.
    while let Ok(e) = rx.try_recv() {
        if !s.handle(e) {
            break;
        }
    }
    s.finish()
}
