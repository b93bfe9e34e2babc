//! One function per acceptance criterion. Each returns a short summary on
//! success and the first discrepancy on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::time::{Duration, Instant};

use danglesweep::analysis::{export_facts, solve_stage1};
use danglesweep::corpus::{generate, workload};
use danglesweep::ir::{parse_module, Inst, Module};
use danglesweep::pipeline::{bench, check_uaf, compile, runtime_stats, Compiled, Verdict};
use danglesweep::runtime::{run, run_with_observer, RuntimeConfig, TrapKind};

use super::soundness::{check, Recorder};
use super::{corpus, oracle, stress};

pub type Outcome = Result<String, String>;

pub const RANDOM_MODULES: u64 = 500;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn load(path: &std::path::Path) -> Module {
    let src = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse_module(&src).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every hand-written corpus file plus the workloads at seed 0.
fn named_corpus() -> Vec<(String, Module)> {
    let mut v = Vec::new();
    for dir in ["motivation", "uaf-scenarios", "controls", "random"] {
        for p in corpus(dir) {
            v.push((format!("{dir}/{}", p.file_name().unwrap().to_string_lossy()), load(&p)));
        }
    }
    for w in danglesweep::corpus::WORKLOADS {
        v.push((format!("workload/{w}"), parse_module(&workload(w, 0).unwrap()).unwrap()));
    }
    v
}

pub fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut facts = 0;
    for seed in 0..RANDOM_MODULES {
        let m = generate(seed);
        let n = m.functions.iter().map(|f| f.insts().count()).sum::<usize>();
        ensure(n <= 50, || format!("seed {seed}: {n} instructions"))?;
        let s = solve_stage1(&m);
        let o = oracle::stage1(&m);
        ensure(s.named_facts() == o.facts, || format!("seed {seed}: points-to facts differ"))?;
        ensure(s.named_type_sets(&m) == o.types, || format!("seed {seed}: type sets differ"))?;
        let calls: BTreeSet<_> = s.call_graph().iter().map(|e| (e.caller.clone(), e.index, e.callee.clone())).collect();
        ensure(calls == o.calls, || format!("seed {seed}: call graphs differ"))?;
        facts += o.facts.len();
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    Ok(format!("{RANDOM_MODULES} modules, {facts} facts equal, {:.1}s", t.as_secs_f64()))
}

pub fn refinement_and_soundness() -> Outcome {
    let mut observed = 0;
    let mut refined = 0;
    let mut modules: Vec<(String, Module)> = (0..RANDOM_MODULES).map(|s| (format!("seed {s}"), generate(s))).collect();
    modules.extend(named_corpus().into_iter().filter(|(n, _)| !n.starts_with("workload")));
    for (name, m) in &modules {
        let c = compile(m);
        let (s1, s2) = (&c.analysis.stage1, &c.analysis.stage2);
        for (k, set) in s2.iter() {
            ensure(set.is_subset(s1.pt(k)), || format!("{name}: stage 2 grows {}", s2.node_label(k)))?;
        }
        if s1.named_facts() != s2.named_facts() {
            refined += 1;
        }
        let rec = Recorder::default();
        let cfg = RuntimeConfig {
            sync_sweep: true,
            step_limit: 100_000,
            ..Default::default()
        };
        run_with_observer(m, &c.table, cfg, Some(&rec)).unwrap();
        let v = check(&rec, s2);
        ensure(v.stores == 0 && v.defs == 0, || format!("{name}: {v:?}"))?;
        observed += v.store_facts + v.def_facts;
    }
    Ok(format!(
        "{} modules, {refined} refined by stage 2, {observed} observed facts covered",
        modules.len()
    ))
}

pub fn motivation() -> Outcome {
    let m = load(&super::corpus_dir("motivation").join("motivation.lir"));
    let c = compile(&m);
    let facts = c.analysis.stage2.named_facts();
    let pt = |k: &str| facts.get(k).cloned().unwrap_or_default();
    let set = |s: &str| BTreeSet::from([s.to_string()]);
    ensure(pt("main:a") == set("o1"), || format!("pt(a) = {:?}", pt("main:a")))?;
    ensure(pt("main:b") == set("o2"), || format!("pt(b) = {:?}", pt("main:b")))?;
    ensure(pt("o1.0") == set("o2"), || format!("pt(o1.0) = {:?}", pt("o1.0")))?;

    let main = m.function("main").unwrap();
    let deref = main
        .insts()
        .position(|i| matches!(i, Inst::Load { dst, .. } if dst == "v"))
        .unwrap();
    let r = check_uaf(&m, &c, true).unwrap();
    let t = &r.protected.traps;
    ensure(
        t.len() == 1 && t[0].kind == TrapKind::NullDeref && t[0].func == "main" && t[0].index == deref,
        || format!("protected traps {t:?}"),
    )?;
    ensure(r.unprotected.traps.is_empty() && r.unprotected.stale_reads > 0, || {
        format!("unprotected: {} stale reads, traps {:?}", r.unprotected.stale_reads, r.unprotected.traps)
    })?;
    Ok(format!(
        "pt facts match; protected null trap at main#{deref}; unprotected {} stale read(s)",
        r.unprotected.stale_reads
    ))
}

pub fn scenarios() -> Outcome {
    let files = corpus("uaf-scenarios");
    ensure(files.len() >= 12, || format!("only {} scenarios", files.len()))?;
    for kind in ["heap_field", "global", "stack", "any_field", "multi_", "free_in_callee"] {
        ensure(files.iter().any(|p| p.to_string_lossy().contains(kind)), || format!("no {kind} scenario"))?;
    }
    for p in &files {
        let name = p.file_name().unwrap().to_string_lossy();
        let m = load(p);
        let r = check_uaf(&m, &compile(&m), true).unwrap();
        ensure(r.verdict == Verdict::Prevented, || format!("{name}: {}", r.verdict.as_str()))?;
        ensure(r.unprotected.stale_reads > 0, || format!("{name}: no stale read unprotected"))?;
    }
    Ok(format!("{0}/{0} prevented, each with an unprotected stale read", files.len()))
}

pub fn stress(threads: usize, rounds: usize) -> Outcome {
    let o = stress::run(threads, rounds, 0x5eed);
    ensure(o.events >= 100_000, || format!("only {} events", o.events))?;
    ensure(o.dangling_cells == 0, || format!("{} covered cells dangle", o.dangling_cells))?;
    ensure(o.registry_matches, || "registry differs from live objects".into())?;
    ensure(o.registry_overlaps == 0, || format!("{} registry overlaps", o.registry_overlaps))?;
    ensure(o.quarantine_violations == 0, || format!("{} quarantine violations", o.quarantine_violations))?;
    ensure(o.still_quarantined == 0 && o.faults == 0, || format!("{o:?}"))?;
    Ok(format!(
        "{} threads, {} events, {} pointers nullified",
        o.threads,
        o.events,
        o.sweep.nullified()
    ))
}

pub fn non_interference() -> Outcome {
    let cfg = RuntimeConfig {
        sync_sweep: true,
        audit: true,
        step_limit: 1_000_000,
        ..Default::default()
    };
    let mut modules = named_corpus();
    modules.retain(|(n, _)| n != "workload/alloc-heavy" && n != "workload/call-intensive");
    modules.extend((0..RANDOM_MODULES).map(|s| (format!("seed {s}"), generate(s))));
    let (mut sweeps, mut nullified) = (0, 0);
    for (name, m) in &modules {
        let r = run(m, &compile(m).table, cfg).unwrap();
        ensure(r.sweep.interference_violations == 0, || {
            format!("{name}: {} cells changed outside the freed range", r.sweep.interference_violations)
        })?;
        ensure(r.sweep.nullity_violations == 0, || format!("{name}: {} covered cells still dangle", r.sweep.nullity_violations))?;
        sweeps += r.sweep.frees_processed;
        nullified += r.nullified();
    }
    ensure(nullified > 0, || "no sweep nullified anything".into())?;
    Ok(format!("{sweeps} audited sweeps over {} modules, {nullified} cells nullified, 0 foreign writes", modules.len()))
}

/// Splits a location label into its object label and offset ("0" for a
/// bare object head).
fn split(label: &str) -> (&str, &str) {
    match label.rsplit_once('.') {
        Some((b, off)) if off == "*" || off.bytes().all(|c| c.is_ascii_digit()) => (b, off),
        _ => (label, "0"),
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Recount {
    static_objects: usize,
    free_sites: usize,
    heap: usize,
    global: usize,
    stack: usize,
}

/// Counts from the printed module and the printed stage-2 facts alone.
fn recount(m: &Module, facts_text: &str) -> Recount {
    let text = m.to_text();
    let mallocs = text.lines().filter(|l| l.contains("= malloc")).count();
    let free_sites = text.lines().filter(|l| l.trim_start().starts_with("call @free(")).count();
    let mut stack_labels = BTreeSet::new();
    let mut func = "";
    for l in text.lines() {
        let l = l.trim();
        if let Some(rest) = l.strip_prefix("fn @") {
            func = rest.split('(').next().unwrap();
        } else if let Some((dst, rhs)) = l.split_once(" = ") {
            if rhs.starts_with("alloca") {
                stack_labels.insert(format!("{func}:{}", dst.trim_start_matches('%')));
            }
        }
    }

    let stage2 = facts_text.split("# stage2\n").nth(1).unwrap();
    let mut pts: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for l in stage2.lines() {
        let Some(rest) = l.strip_prefix("pt ") else { continue };
        let (k, v) = rest.split_once(" -> ").unwrap();
        let v = v.trim_start_matches('{').trim_end_matches('}');
        pts.insert(k, v.split(", ").collect());
    }
    let is_heap = |base: &str| base.starts_with("x:") || (base.starts_with('o') && base[1..].bytes().all(|c| c.is_ascii_digit()));
    let mut extern_objects = BTreeSet::new();
    for (k, v) in &pts {
        for l in v.iter().chain(std::iter::once(k)) {
            let (b, _) = split(l);
            if b.starts_with("x:") {
                extern_objects.insert(b.to_string());
            }
        }
    }
    let (mut heap, mut global, mut stack) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for (k, v) in &pts {
        if k.contains('%') || k.starts_with('@') {
            continue;
        }
        if !v.iter().any(|t| is_heap(split(t).0)) {
            continue;
        }
        let (b, off) = split(k);
        if is_heap(b) {
            heap.insert((b, off));
        } else if b.starts_with("g:") {
            global.insert(b);
        } else if stack_labels.contains(b) {
            stack.insert(b);
        }
    }
    Recount {
        static_objects: mallocs + extern_objects.len(),
        free_sites,
        heap: heap.len(),
        global: global.len(),
        stack: stack.len(),
    }
}

fn stats_of(m: &Module, c: &Compiled) -> Recount {
    let s = c.stats(m);
    Recount {
        static_objects: s.static_objects,
        free_sites: s.free_sites,
        heap: s.heap_pointers,
        global: s.global_pointers,
        stack: s.stack_pointers,
    }
}

pub fn stats_recount() -> Outcome {
    let mut modules = named_corpus();
    modules.extend((0..RANDOM_MODULES).map(|s| (format!("seed {s}"), generate(s))));
    let mut totals = [0usize; 5];
    for (name, m) in &modules {
        let c = compile(m);
        let emitted = stats_of(m, &c);
        let counted = recount(m, &export_facts(&c.analysis, m));
        ensure(emitted == counted, || format!("{name}: emitted {emitted:?}, recounted {counted:?}"))?;
        for (t, v) in totals.iter_mut().zip([counted.static_objects, counted.free_sites, counted.heap, counted.global, counted.stack]) {
            *t += v;
        }
        let r = run(m, &c.table, RuntimeConfig { sync_sweep: true, step_limit: 1_000_000, ..Default::default() }).unwrap();
        let s = runtime_stats(c.stats(m), &r);
        ensure(
            s.runtime_allocs == Some(r.sweep.allocs_seen)
                && s.runtime_frees == Some(r.sweep.frees_processed)
                && s.invalidated_pointers == Some(r.sweep.nullified_heap + r.sweep.nullified_global + r.sweep.nullified_stack),
            || format!("{name}: runtime columns {s:?} disagree with the sweep report"),
        )?;
    }
    Ok(format!(
        "{} modules; totals objects {} free sites {} heap {} global {} stack {}",
        modules.len(),
        totals[0],
        totals[1],
        totals[2],
        totals[3],
        totals[4]
    ))
}

pub fn bench_sanity(threads: usize, reps: usize) -> Outcome {
    let m = parse_module(&workload("alloc-heavy", 0).unwrap()).unwrap();
    let r = bench(&m, &compile(&m), threads, reps).unwrap();
    let off = r.row("protected-stack-off").unwrap().ratio;
    let on = r.row("protected-stack-on").unwrap().ratio;
    ensure(off.is_finite() && on.is_finite() && off > 0.0, || format!("ratios {off} {on}"))?;
    ensure(on >= off, || format!("stack-on ratio {on:.3} below stack-off ratio {off:.3}"))?;
    Ok(format!("stack-off ratio {off:.2}, stack-on ratio {on:.2}"))
}
