//! Multi-threaded alloc/free stress driven straight through the runtime
//! hooks, with the sweeper running concurrently.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use danglesweep::metadata::{ContainerLayout, GlobalEntry, ObjectEntry, ObjectPointerTable, StaticPointerRecord, ANY_POINTER_FIELD};
use danglesweep::runtime::memory::GLOBAL_BASE;
use danglesweep::runtime::{Runtime, RuntimeConfig};
use danglesweep::sweeper::{run_sweeper, SweepReport};

pub const SITES: u32 = 6;
const GLOBAL_CELLS: u64 = 8;

/// Sites 0..4 are typed 24-byte containers with pointers at 0, 8 and 16;
/// sites 4 and 5 are untyped 32-byte blobs. Even sites are covered at
/// offset 8 only, odd sites through ANY. Every site may be held by every
/// container and by the shared global.
pub fn table() -> ObjectPointerTable {
    let mut t = ObjectPointerTable {
        globals: vec![GlobalEntry {
            name: "shared".into(),
            size: GLOBAL_CELLS * 8,
        }],
        ..Default::default()
    };
    for id in 0..SITES {
        let mut records = vec![StaticPointerRecord::Global { index: 0 }];
        for c in 0..SITES {
            let offset = if c % 2 == 0 { 8 } else { ANY_POINTER_FIELD };
            records.push(StaticPointerRecord::HeapField { container: c, offset });
        }
        let layout = ContainerLayout {
            typed: id < 4,
            pointer_offsets: vec![0, 8, 16],
        };
        t.objects.insert(id, ObjectEntry { layout, records });
    }
    t
}

pub fn size_of(site: u32) -> u64 {
    if site < 4 {
        24
    } else {
        32
    }
}

/// Cells of a live container of `site` that the table covers.
pub fn covered(site: u32, start: u64) -> Vec<u64> {
    if site % 2 == 0 {
        vec![start + 8]
    } else {
        (0..size_of(site) / 8).map(|i| start + i * 8).collect()
    }
}

#[derive(Debug)]
pub struct StressOutcome {
    pub events: u64,
    pub threads: usize,
    /// Covered cells whose value is not the last pointer stored to a
    /// still-live object.
    pub dangling_cells: usize,
    pub registry_matches: bool,
    pub registry_overlaps: u64,
    pub quarantine_violations: u64,
    pub still_quarantined: usize,
    pub faults: usize,
    pub sweep: SweepReport,
}

/// The last value stored to each cell, with the allocation number of the
/// object it points into.
type Shadow = Mutex<HashMap<u64, (u64, u64)>>;

/// Returns the thread's live objects: start -> (site, allocation number).
fn worker(rt: &Runtime, shadow: &Shadow, next: &AtomicU64, thread: usize, rounds: usize, seed: u64) -> BTreeMap<u64, (u32, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((thread as u64) << 32));
    // Pointers are only ever stored while their target is live, so a free
    // always follows every store of its address in program order.
    let mut own: BTreeMap<u64, (u32, u64)> = BTreeMap::new();
    for _ in 0..rounds {
        let site = rng.gen_range(0..SITES);
        let a = rt.on_alloc(site, size_of(site)).expect("heap has room");
        let n = next.fetch_add(1, Ordering::Relaxed);
        {
            let mut sh = shadow.lock().unwrap();
            for i in 0..size_of(site) / 8 {
                sh.remove(&(a + i * 8));
            }
        }
        own.insert(a, (site, n));

        for _ in 0..2 {
            let (&t, &(ts, tn)) = own.iter().nth(rng.gen_range(0..own.len())).unwrap();
            let value = t + rng.gen_range(0..size_of(ts));
            let cell = if rng.gen_bool(0.2) {
                GLOBAL_BASE + rng.gen_range(0..GLOBAL_CELLS) * 8
            } else {
                let (&h, &(hs, _)) = own.iter().nth(rng.gen_range(0..own.len())).unwrap();
                h + rng.gen_range(0..size_of(hs) / 8) * 8
            };
            // Global cells are shared; the lock keeps the shadow in step
            // with the last store. Sweeper writes do not take it.
            let mut sh = shadow.lock().unwrap();
            rt.memory.store(cell, value);
            sh.insert(cell, (value, tn));
        }

        while own.len() > 12 || (!own.is_empty() && rng.gen_bool(0.3)) {
            let (&victim, _) = own.iter().nth(rng.gen_range(0..own.len())).unwrap();
            own.remove(&victim);
            rt.on_free(thread, victim).expect("owned object frees cleanly");
        }
    }
    own
}

/// Run `threads` producers for `rounds` allocations each.
pub fn run(threads: usize, rounds: usize, seed: u64) -> StressOutcome {
    let cfg = RuntimeConfig {
        threads,
        ..Default::default()
    };
    let (rt, rx) = Runtime::new(Arc::new(table()), vec![GLOBAL_BASE], cfg);
    let rx = rx.unwrap();
    let shadow = Shadow::default();
    let next = AtomicU64::new(0);
    let (sweep, live) = thread::scope(|s| {
        let sweeper = s.spawn(|| run_sweeper(&rt, rx));
        let producers: Vec<_> = (0..threads)
            .map(|t| {
                let (rt, shadow, next) = (&rt, &shadow, &next);
                s.spawn(move || worker(rt, shadow, next, t, rounds, seed))
            })
            .collect();
        let mut live = BTreeMap::new();
        for p in producers {
            live.extend(p.join().unwrap());
        }
        rt.shutdown();
        (sweeper.join().unwrap(), live)
    });

    let live_numbers: HashSet<u64> = live.values().map(|(_, n)| *n).collect();
    let mut cells: Vec<u64> = (0..GLOBAL_CELLS).map(|i| GLOBAL_BASE + i * 8).collect();
    for (start, (site, _)) in &live {
        cells.extend(covered(*site, *start));
    }
    let shadow = shadow.into_inner().unwrap();
    let mut dangling_cells = 0;
    for c in cells {
        let v = rt.memory.load(c);
        if v == 0 {
            continue;
        }
        match shadow.get(&c) {
            Some((sv, n)) if *sv == v && live_numbers.contains(n) => {}
            _ => dangling_cells += 1,
        }
    }
    let registry: BTreeSet<u64> = rt.registry.snapshot().iter().map(|r| r.start).collect();

    StressOutcome {
        events: rt.allocs() + rt.frees(),
        threads,
        dangling_cells,
        registry_matches: registry.into_iter().eq(live.keys().copied()),
        registry_overlaps: rt.registry_overlaps(),
        quarantine_violations: rt.quarantine_violations(),
        still_quarantined: rt.quarantined(),
        faults: rt.faults().len(),
        sweep,
    }
}
