use std::fmt::Write;

use serde::Serialize;

use crate::sweeper::SweepReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrapKind {
    NullDeref,
    Misaligned,
    Unmapped,
    BadCallee,
    ArityMismatch,
    ZeroSizeAlloc,
    OutOfMemory,
    StackOverflow,
    CallDepth,
    StepLimit,
    MissingPhiInput,
}

/// An error that stops one application thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trap {
    pub thread: usize,
    pub kind: TrapKind,
    pub func: String,
    pub index: usize,
    pub addr: u64,
}

/// A recorded error after which execution continues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Fault {
    DoubleFree { thread: usize, addr: u64 },
    InvalidFree { thread: usize, addr: u64 },
    FrameExit { thread: usize, token: u64 },
}

/// A read or write of heap memory that is not part of a live object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StaleAccess {
    pub thread: usize,
    pub write: bool,
    pub func: String,
    pub index: usize,
    pub addr: u64,
    /// The value read, or written.
    pub value: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExecutionReport {
    pub protected: bool,
    pub stack_protection: bool,
    pub threads: usize,
    pub steps: u64,
    pub allocs: u64,
    pub frees: u64,
    pub events: u64,
    /// Values passed to `@print`, per thread.
    pub output: Vec<Vec<i64>>,
    pub traps: Vec<Trap>,
    pub faults: Vec<Fault>,
    pub stale_reads: u64,
    pub stale_writes: u64,
    /// The first few stale accesses.
    pub stale_samples: Vec<StaleAccess>,
    pub peak_heap_bytes: u64,
    pub peak_stack_bytes: u64,
    pub registry_overlaps: u64,
    pub quarantine_violations: u64,
    pub wall_time_ns: u64,
    pub sweep: SweepReport,
}

impl ExecutionReport {
    pub fn stale_accesses(&self) -> u64 {
        self.stale_reads + self.stale_writes
    }

    pub fn null_traps(&self) -> usize {
        self.traps.iter().filter(|t| t.kind == TrapKind::NullDeref).count()
    }

    pub fn nullified(&self) -> u64 {
        self.sweep.nullified_heap + self.sweep.nullified_global + self.sweep.nullified_stack
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = if self.protected { "protected" } else { "unprotected" };
        let _ = writeln!(s, "mode {mode}");
        let _ = writeln!(s, "stack_protection {}", self.stack_protection);
        let _ = writeln!(s, "threads {}", self.threads);
        let _ = writeln!(s, "steps {}", self.steps);
        let _ = writeln!(s, "allocs {}", self.allocs);
        let _ = writeln!(s, "frees {}", self.frees);
        let _ = writeln!(s, "events {}", self.events);
        for (t, out) in self.output.iter().enumerate() {
            let vals: Vec<String> = out.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "output {t} [{}]", vals.join(" "));
        }
        for t in &self.traps {
            let _ = writeln!(
                s,
                "trap thread={} {:?} at {}#{} addr=0x{:x}",
                t.thread, t.kind, t.func, t.index, t.addr
            );
        }
        for f in &self.faults {
            let _ = writeln!(s, "fault {f:?}");
        }
        let _ = writeln!(s, "stale_reads {}", self.stale_reads);
        let _ = writeln!(s, "stale_writes {}", self.stale_writes);
        let _ = writeln!(s, "nullified heap={} global={} stack={}", self.sweep.nullified_heap, self.sweep.nullified_global, self.sweep.nullified_stack);
        let _ = writeln!(s, "released_bytes {}", self.sweep.released_bytes);
        let _ = writeln!(s, "frames_reclaimed {}", self.sweep.frames_reclaimed);
        let _ = writeln!(s, "peak_heap_bytes {}", self.peak_heap_bytes);
        let _ = writeln!(s, "peak_stack_bytes {}", self.peak_stack_bytes);
        let _ = writeln!(s, "wall_time_ns {}", self.wall_time_ns);
        s
    }
}
