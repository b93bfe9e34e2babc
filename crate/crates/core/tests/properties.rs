mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use danglesweep::analysis::{analyze, export_facts, Solver, WorklistOrder};
use danglesweep::corpus::{generate, generate_source};
use danglesweep::ir::parse_module;
use danglesweep::metadata::{
    assign_global_indices, deserialize_tables, serialize_tables, ContainerLayout, FunctionEntry, GlobalEntry, ObjectEntry,
    ObjectPointerTable, SlotEntry, StaticPointerRecord, ANY_POINTER_FIELD,
};
use danglesweep::pipeline::compile;
use danglesweep::runtime::heap::HeapAllocator;
use danglesweep::runtime::{register_globals, run, AllocationRegistry, Runtime, RuntimeConfig, RuntimeObjectRecord};
use danglesweep::sweeper::Sweeper;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn points_to_and_type_sets_only_grow(seed in any::<u64>()) {
        let m = generate(seed);
        let mut s = Solver::stage1(&m, WorklistOrder::Fifo);
        let mut prev = s.snapshot();
        let mut prev_types = s.type_snapshot();
        while s.step() {
            let cur = s.snapshot();
            for (k, set) in &prev {
                prop_assert!(set.is_subset(&cur[k]), "{k:?} shrank");
            }
            let cur_types = s.type_snapshot();
            for (o, set) in &prev_types {
                prop_assert!(set.is_subset(&cur_types[o]));
            }
            prev = cur;
            prev_types = cur_types;
        }
    }

    #[test]
    fn stage2_refines_stage1(seed in any::<u64>()) {
        let m = generate(seed);
        let a = analyze(&m);
        for (k, set) in a.stage2.iter() {
            prop_assert!(set.is_subset(a.stage1.pt(k)), "{k:?}");
        }
        prop_assert_eq!(a.stage1.type_sets(), a.stage2.type_sets());
    }

    #[test]
    fn analysis_is_deterministic(seed in any::<u64>()) {
        let m = generate(seed);
        let a = analyze(&m);
        let b = analyze(&parse_module(&generate_source(seed)).unwrap());
        prop_assert_eq!(export_facts(&a, &m), export_facts(&b, &m));
        let lifo = Solver::stage1(&m, WorklistOrder::Lifo).solve();
        prop_assert_eq!(a.stage1.named_facts(), lifo.named_facts());
        let lifo2 = Solver::stage2(&m, &a.stage1, WorklistOrder::Lifo).solve();
        prop_assert_eq!(a.stage2.named_facts(), lifo2.named_facts());
    }

    #[test]
    fn printed_modules_reparse_identically(seed in any::<u64>()) {
        let m = generate(seed);
        let again = parse_module(&m.to_text()).unwrap();
        prop_assert_eq!(again.to_text(), m.to_text());
        prop_assert_eq!(again.build_hash(), m.build_hash());
    }

    #[test]
    fn compiled_tables_round_trip(seed in any::<u64>()) {
        let m = generate(seed);
        let t = compile(&m).table;
        let bytes = serialize_tables(&t);
        prop_assert_eq!(deserialize_tables(&bytes).unwrap(), t.clone());
        t.check_against(&m).unwrap();
    }

    #[test]
    fn global_array_follows_index_map(seed in any::<u64>()) {
        let m = generate(seed);
        let index = assign_global_indices(&m);
        let addrs = register_globals(&m, &index);
        prop_assert_eq!(addrs.len(), m.globals.len());
        let distinct: BTreeSet<u64> = addrs.iter().copied().collect();
        prop_assert_eq!(distinct.len(), addrs.len());
        // Declaration order determines layout; the array is its permutation.
        let mut by_decl: Vec<u64> = m.globals.iter().map(|g| addrs[index[&g.name] as usize]).collect();
        let sorted = { let mut v = by_decl.clone(); v.sort_unstable(); v };
        prop_assert_eq!(&by_decl, &sorted);
        by_decl.dedup();
        prop_assert_eq!(by_decl.len(), m.globals.len());
    }
}

fn record_strategy() -> impl Strategy<Value = StaticPointerRecord> {
    prop_oneof![
        (any::<u32>(), prop_oneof![Just(ANY_POINTER_FIELD), 0u32..4096])
            .prop_map(|(container, offset)| StaticPointerRecord::HeapField { container, offset }),
        any::<u32>().prop_map(|index| StaticPointerRecord::Global { index }),
        (any::<u32>(), any::<u32>()).prop_map(|(function_id, slot_id)| StaticPointerRecord::Stack { function_id, slot_id }),
    ]
}

fn table_strategy(max_objects: usize) -> impl Strategy<Value = ObjectPointerTable> {
    let entry = (
        any::<bool>(),
        proptest::collection::vec(0u32..256, 0..4),
        proptest::collection::vec(record_strategy(), 0..6),
    )
        .prop_map(|(typed, pointer_offsets, records)| ObjectEntry {
            layout: ContainerLayout { typed, pointer_offsets },
            records,
        });
    (
        any::<u64>(),
        proptest::collection::btree_map(any::<u32>(), entry, 0..max_objects),
        proptest::collection::vec(("[a-z]{1,8}", any::<u64>()), 0..4),
        proptest::collection::vec(("[a-z]{1,8}", proptest::collection::vec((any::<u32>(), any::<u64>()), 0..3)), 0..4),
    )
        .prop_map(|(build_hash, objects, globals, functions)| ObjectPointerTable {
            build_hash,
            objects,
            globals: globals.into_iter().map(|(name, size)| GlobalEntry { name, size }).collect(),
            functions: functions
                .into_iter()
                .map(|(name, slots)| FunctionEntry {
                    name,
                    slots: slots.into_iter().map(|(site, size)| SlotEntry { site, size }).collect(),
                })
                .collect(),
        })
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn arbitrary_tables_round_trip(t in table_strategy(40)) {
        let bytes = serialize_tables(&t);
        prop_assert_eq!(deserialize_tables(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_tables_never_parse(t in table_strategy(8), cut in any::<prop::sample::Index>()) {
        let bytes = serialize_tables(&t);
        let n = cut.index(bytes.len());
        prop_assert!(deserialize_tables(&bytes[..n]).is_err());
    }
}

#[test]
fn thousand_object_table_round_trips() {
    let mut t = ObjectPointerTable {
        build_hash: 0xfeed,
        ..Default::default()
    };
    for id in 0..1000u32 {
        let records = (0..(id % 5))
            .map(|k| match k % 3 {
                0 => StaticPointerRecord::HeapField {
                    container: (id * 7 + k) % 1000,
                    offset: if k == 3 { ANY_POINTER_FIELD } else { k * 8 },
                },
                1 => StaticPointerRecord::Global { index: k },
                _ => StaticPointerRecord::Stack {
                    function_id: id % 13,
                    slot_id: k,
                },
            })
            .collect();
        t.objects.insert(
            id,
            ObjectEntry {
                layout: ContainerLayout {
                    typed: id % 2 == 0,
                    pointer_offsets: vec![0, 16],
                },
                records,
            },
        );
    }
    let bytes = serialize_tables(&t);
    assert_eq!(deserialize_tables(&bytes).unwrap(), t);
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn registry_agrees_with_linear_scan(
        sizes in proptest::collection::vec(1u64..200, 1..400),
        frees in proptest::collection::vec(any::<bool>(), 400),
        probes in proptest::collection::vec(0u64..0x20000, 200),
    ) {
        let heap = HeapAllocator::new();
        let reg = AllocationRegistry::new();
        let mut live: Vec<RuntimeObjectRecord> = Vec::new();
        for (i, size) in sizes.iter().enumerate() {
            let start = heap.reserve(*size).unwrap();
            let rec = RuntimeObjectRecord { start, end: start + size, size: *size, static_id: i as u32 % 7 };
            prop_assert!(reg.insert(rec));
            live.push(rec);
            if frees[i] && live.len() > 1 {
                let r = live.swap_remove(i % live.len());
                prop_assert_eq!(reg.remove(r.start), Some(r));
                prop_assert_eq!(reg.remove(r.start), None);
                heap.release(r.start, r.size);
            }
        }
        let base = danglesweep::runtime::memory::HEAP_BASE;
        for p in probes {
            let a = base + p;
            let want = live.iter().find(|r| r.contains(a)).copied();
            prop_assert_eq!(reg.lookup(a), want);
        }
        prop_assert_eq!(reg.len(), live.len());
    }

    #[test]
    fn free_free_programs_behave_identically_in_both_modes(seed in any::<u64>()) {
        let src: String = generate_source(seed)
            .lines()
            .filter(|l| !l.contains("@free"))
            .map(|l| format!("{l}\n"))
            .collect();
        let m = parse_module(&src).unwrap();
        let c = compile(&m);
        let limit = |cfg: RuntimeConfig| RuntimeConfig { step_limit: 100_000, ..cfg };
        let u = run(&m, &c.table, limit(RuntimeConfig::unprotected())).unwrap();
        let p = run(&m, &c.table, limit(RuntimeConfig::default())).unwrap();
        prop_assert_eq!(u.steps, p.steps);
        prop_assert_eq!(u.allocs, p.allocs);
        prop_assert_eq!(&u.output, &p.output);
        let trap = |r: &danglesweep::runtime::ExecutionReport| {
            r.traps.iter().map(|t| (t.kind, t.func.clone(), t.index)).collect::<Vec<_>>()
        };
        prop_assert_eq!(trap(&u), trap(&p));
        prop_assert_eq!(p.nullified(), 0);
    }

    #[test]
    fn grouping_matches_live_allocations(ops in proptest::collection::vec((0u32..5, 1u64..64, any::<bool>()), 1..200)) {
        let (rt, rx) = Runtime::new(Arc::new(ObjectPointerTable::default()), Vec::new(), RuntimeConfig::default());
        let rx = rx.unwrap();
        let mut sweeper = Sweeper::new(&rt);
        let mut live: Vec<u64> = Vec::new();
        for (site, size, free) in ops {
            let a = rt.on_alloc(site, size).unwrap();
            live.push(a);
            if free {
                let victim = live.remove(0);
                rt.on_free(0, victim).unwrap();
            }
            while let Ok(e) = rx.try_recv() {
                sweeper.handle(e);
            }
            let mut want: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
            for r in rt.registry.snapshot() {
                want.entry(r.static_id).or_default().insert(r.start);
            }
            for site in 0..5 {
                let got: BTreeSet<u64> = sweeper.grouping().live(site).map(|r| r.start).collect();
                prop_assert_eq!(&got, &want.get(&site).cloned().unwrap_or_default());
            }
        }
        prop_assert_eq!(rt.quarantined(), 0);
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn heap_reservations_never_overlap(ops in proptest::collection::vec((1u64..300, any::<bool>(), any::<prop::sample::Index>()), 1..300)) {
        let heap = HeapAllocator::new();
        let mut live: BTreeMap<u64, u64> = BTreeMap::new();
        for (size, free, pick) in ops {
            let a = heap.reserve(size).unwrap();
            let len = danglesweep::runtime::memory::round_up(size);
            prop_assert_eq!(a % 8, 0);
            if let Some((s, l)) = live.range(..a + len).next_back() {
                prop_assert!(s + l <= a, "{a:#x} overlaps {s:#x}");
            }
            live.insert(a, len);
            if free {
                let k = *live.keys().nth(pick.index(live.len())).unwrap();
                let l = live.remove(&k).unwrap();
                heap.release(k, l);
            }
            prop_assert_eq!(heap.in_use(), live.values().sum::<u64>());
            prop_assert!(heap.top() <= heap.high_water());
        }
    }

    #[test]
    fn location_facts_and_records_correspond(seed in any::<u64>()) {
        use danglesweep::analysis::{Loc, NodeKey, Offset, SiteKind};
        let m = generate(seed);
        let c = compile(&m);
        let st = &c.analysis.stage2;
        let objs = st.objects();
        let mut want: BTreeSet<(u32, StaticPointerRecord)> = BTreeSet::new();
        for (k, pts) in st.iter() {
            let NodeKey::Loc(l) = k else { continue };
            if objs.kind(l.base()) != SiteKind::Heap {
                continue;
            }
            let rec = match l {
                Loc::Obj(o) => StaticPointerRecord::HeapField { container: o.0, offset: 0 },
                Loc::Field(o, Offset::At(f)) => StaticPointerRecord::HeapField { container: o.0, offset: *f as u32 },
                Loc::Field(o, Offset::Any) => StaticPointerRecord::HeapField { container: o.0, offset: ANY_POINTER_FIELD },
            };
            for t in pts {
                if objs.kind(t.base()) == SiteKind::Heap {
                    want.insert((t.base().0, rec));
                }
            }
        }
        let got: BTreeSet<(u32, StaticPointerRecord)> = c
            .table
            .objects
            .iter()
            .flat_map(|(id, e)| e.records.iter().filter(|r| matches!(r, StaticPointerRecord::HeapField { .. })).map(move |r| (*id, *r)))
            .collect();
        prop_assert_eq!(got, want);
        let bytes = serialize_tables(&c.table);
        prop_assert_eq!(&serialize_tables(&compile(&m).table), &bytes);
        prop_assert_eq!(serialize_tables(&deserialize_tables(&bytes).unwrap()), bytes);
    }
}

/// Five heap sites. Sites 0..3 are typed three-pointer containers; site 4
/// is untyped. Any site may be pointed to from global 0 and from every
/// container: at offset 8 in sites 0 and 2, through ANY in the others.
fn sweep_table() -> ObjectPointerTable {
    let mut t = ObjectPointerTable {
        globals: vec![GlobalEntry { name: "root".into(), size: 16 }],
        ..Default::default()
    };
    for id in 0..5u32 {
        let mut records = vec![StaticPointerRecord::Global { index: 0 }];
        for c in 0..5u32 {
            records.push(StaticPointerRecord::HeapField { container: c, offset: if c == 0 || c == 2 { 8 } else { ANY_POINTER_FIELD } });
        }
        t.objects.insert(
            id,
            ObjectEntry {
                layout: ContainerLayout { typed: id < 4, pointer_offsets: vec![0, 8, 16] },
                records,
            },
        );
    }
    t
}

fn object_size(site: u32) -> u64 {
    if site < 4 { 24 } else { 40 }
}

/// Cells the table above covers for a live container of `site`.
fn model_cells(site: u32, start: u64) -> Vec<u64> {
    match site {
        0 | 2 => vec![start + 8],
        1 | 3 => vec![start, start + 8, start + 16],
        _ => (0..5).map(|i| start + i * 8).collect(),
    }
}

#[derive(Debug, Clone)]
enum SweepOp {
    Alloc(u32),
    Store { holder: prop::sample::Index, cell: u64, target: prop::sample::Index, interior: u64 },
    StoreGlobal { cell: u64, target: prop::sample::Index },
    Free(prop::sample::Index),
}

fn sweep_op() -> impl Strategy<Value = SweepOp> {
    prop_oneof![
        3 => (0u32..5).prop_map(SweepOp::Alloc),
        4 => (any::<prop::sample::Index>(), 0u64..5, any::<prop::sample::Index>(), 0u64..24)
            .prop_map(|(holder, cell, target, interior)| SweepOp::Store { holder, cell, target, interior }),
        1 => (0u64..2, any::<prop::sample::Index>()).prop_map(|(cell, target)| SweepOp::StoreGlobal { cell, target }),
        2 => any::<prop::sample::Index>().prop_map(SweepOp::Free),
    ]
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn sweeps_match_an_offline_replay(ops in proptest::collection::vec(sweep_op(), 1..150)) {
        let global = danglesweep::runtime::memory::GLOBAL_BASE;
        let (rt, rx) = Runtime::new(Arc::new(sweep_table()), vec![global], RuntimeConfig { audit: true, ..Default::default() });
        let rx = rx.unwrap();
        let mut sweeper = Sweeper::new(&rt);

        // Model: live objects by start, and every non-zero cell.
        let mut live: BTreeMap<u64, u32> = BTreeMap::new();
        let mut cells: BTreeMap<u64, u64> = BTreeMap::new();
        let mut expected_nullified = 0u64;

        for op in ops {
            match op {
                SweepOp::Alloc(site) => {
                    let a = rt.on_alloc(site, object_size(site)).unwrap();
                    for off in (0..object_size(site)).step_by(8) {
                        cells.remove(&(a + off));
                    }
                    live.insert(a, site);
                }
                SweepOp::Store { holder, cell, target, interior } => {
                    if live.is_empty() {
                        continue;
                    }
                    let (&h, &hs) = live.iter().nth(holder.index(live.len())).unwrap();
                    let (&t, &ts) = live.iter().nth(target.index(live.len())).unwrap();
                    let addr = h + (cell * 8).min(object_size(hs) - 8);
                    let value = t + interior.min(object_size(ts) - 1);
                    rt.memory.store(addr, value);
                    cells.insert(addr, value);
                }
                SweepOp::StoreGlobal { cell, target } => {
                    if live.is_empty() {
                        continue;
                    }
                    let (&t, _) = live.iter().nth(target.index(live.len())).unwrap();
                    rt.memory.store(global + cell * 8, t);
                    cells.insert(global + cell * 8, t);
                }
                SweepOp::Free(pick) => {
                    if live.is_empty() {
                        continue;
                    }
                    let (&a, &site) = live.iter().nth(pick.index(live.len())).unwrap();
                    live.remove(&a);
                    let end = a + object_size(site);
                    let mut covered: Vec<u64> = vec![global, global + 8];
                    for (&s, &c) in &live {
                        covered.extend(model_cells(c, s));
                    }
                    for addr in covered {
                        if let Some(v) = cells.get(&addr).copied() {
                            if (a..end).contains(&v) {
                                cells.remove(&addr);
                                expected_nullified += 1;
                            }
                        }
                    }
                    rt.on_free(0, a).unwrap();
                }
            }
            while let Ok(e) = rx.try_recv() {
                sweeper.handle(e);
            }
        }
        let report = sweeper.finish();
        prop_assert_eq!(report.nullified(), expected_nullified);
        prop_assert_eq!(report.interference_violations, 0);
        prop_assert_eq!(report.nullity_violations, 0);
        let actual: BTreeMap<u64, u64> = rt.memory.snapshot().into_iter().filter(|(_, v)| *v != 0).collect();
        prop_assert_eq!(actual, cells);
        prop_assert_eq!(rt.quarantined(), 0);
    }
}

#[test]
fn any_record_over_three_pointer_struct_writes_one_cell() {
    let (rt, rx) = Runtime::new(Arc::new(sweep_table()), vec![danglesweep::runtime::memory::GLOBAL_BASE], RuntimeConfig::default());
    let rx = rx.unwrap();
    let mut sweeper = Sweeper::new(&rt);
    let holder = rt.on_alloc(1, 24).unwrap();
    let victim = rt.on_alloc(0, 24).unwrap();
    let other = rt.on_alloc(0, 24).unwrap();
    rt.memory.store(holder, other);
    rt.memory.store(holder + 8, victim + 16);
    rt.memory.store(holder + 16, 12345);
    rt.on_free(0, victim).unwrap();
    while let Ok(e) = rx.try_recv() {
        sweeper.handle(e);
    }
    let r = sweeper.finish();
    assert_eq!(r.nullified(), 1);
    assert_eq!(r.nullified_heap, 1);
    assert_eq!(rt.memory.load(holder), other);
    assert_eq!(rt.memory.load(holder + 8), 0);
    assert_eq!(rt.memory.load(holder + 16), 12345);
}
