use std::collections::HashMap;
use std::time::Instant;

use super::memory::{self, region_of, Region, FUNCTION_BASE, FUNCTION_STRIDE, NATIVE_STACK_BASE, STACK_REGION, WORD};
use super::report::{ExecutionReport, StaleAccess, Trap, TrapKind};
use super::{global_addresses, register_globals, Runtime, RuntimeConfig};
use crate::analysis::ObjectTable;
use crate::ir::{is_intrinsic, ArithOp, Inst, Module, Operand, FREE_INTRINSIC, PRINT_INTRINSIC};
use crate::metadata::{assign_global_indices, MetadataError, ObjectPointerTable};
use crate::sweeper::{run_sweeper, SweepReport};

const MAX_CALL_DEPTH: usize = 4096;
const STALE_SAMPLES: usize = 32;

/// A resolved runtime address: static object id and byte offset into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Target {
    pub static_id: u32,
    pub offset: u64,
}

/// Hook for comparing executions against analysis results. Callbacks fire
/// only for values that resolve to a live object.
pub trait Observer: Sync {
    /// Register `reg` of `func` was assigned a pointer to `value`.
    fn on_def(&self, _func: &str, _reg: &str, _value: Target) {}
    /// A pointer to `value` was written into the cell at `cell`.
    fn on_store(&self, _cell: Target, _value: Target) {}
}

#[derive(Debug, Clone, Copy)]
enum Val {
    Reg(u32),
    Imm(u64),
}

#[derive(Debug, Clone)]
enum Op {
    Alloca { dst: u32, slot: u32 },
    Malloc { dst: u32, size: Val, site: u32 },
    Move { dst: u32, src: Val },
    Load { dst: u32, addr: Val },
    Store { addr: Val, value: Val },
    Phi { dst: u32, incoming: Vec<(u32, Val)> },
    Field { dst: u32, base: Val, offset: u64, dynamic: Vec<(Val, u64)> },
    Call { dst: Option<u32>, callee: Val, args: Vec<Val> },
    Free { ptr: Val },
    Print { value: Val },
    Ret { value: Option<Val> },
    Arith { dst: u32, op: ArithOp, lhs: Val, rhs: Val },
    Br { cond: Val, then_pc: u32, else_pc: u32 },
    Jmp { pc: u32 },
}

#[derive(Debug, Clone)]
struct AllocaInfo {
    size: u64,
    static_id: u32,
    /// Position on the dedicated stack frame, when the slot is tracked.
    slot: Option<u32>,
}

#[derive(Debug)]
struct LFunc {
    name: String,
    id: u32,
    params: Vec<u32>,
    regs: Vec<String>,
    code: Vec<Op>,
    /// Block index of each pc.
    block_of: Vec<u32>,
    allocas: Vec<AllocaInfo>,
    /// Sizes of the dedicated-stack slots, by slot id.
    slot_sizes: Vec<u64>,
}

#[derive(Default)]
struct RegMap {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl RegMap {
    fn get(&mut self, name: &str) -> u32 {
        if let Some(i) = self.index.get(name) {
            return *i;
        }
        self.names.push(name.to_string());
        let i = self.names.len() as u32 - 1;
        self.index.insert(name.to_string(), i);
        i
    }
}

struct Program {
    funcs: Vec<LFunc>,
    externs: usize,
    function_static: Vec<u32>,
    /// None for a module without functions.
    entry: Option<usize>,
    globals_static: Vec<(u64, u64, u32)>,
}

fn func_value(i: usize) -> u64 {
    FUNCTION_BASE + i as u64 * FUNCTION_STRIDE
}

fn lower(module: &Module, rt: &Runtime, objects: &ObjectTable) -> Program {
    let gaddr = global_addresses(module, rt);
    let mut fidx: HashMap<&str, usize> = HashMap::new();
    for (i, f) in module.functions.iter().enumerate() {
        fidx.insert(&f.name, i);
    }
    for (i, e) in module.externs.iter().enumerate() {
        fidx.insert(e, module.functions.len() + i);
    }

    let mut funcs = Vec::new();
    for (fid, f) in module.functions.iter().enumerate() {
        let meta = rt.metadata.functions.get(fid);
        let mut regs = RegMap::default();
        let params: Vec<u32> = f.params.iter().map(|p| regs.get(p)).collect();
        let mut block_pc = HashMap::new();
        let mut pc = 0u32;
        for b in &f.blocks {
            block_pc.insert(b.label.as_str(), pc);
            pc += b.insts.len() as u32;
        }
        let block_ix: HashMap<&str, u32> = f.blocks.iter().enumerate().map(|(i, b)| (b.label.as_str(), i as u32)).collect();
        let mut block_of = Vec::new();
        for (i, b) in f.blocks.iter().enumerate() {
            block_of.extend(std::iter::repeat(i as u32).take(b.insts.len()));
        }

        let mut code = Vec::new();
        let mut allocas = Vec::new();
        let mut slot_sizes = Vec::new();
        for (index, inst) in f.insts().enumerate() {
            let val = |op: &Operand, regs: &mut RegMap| match op {
                Operand::Reg(r) => Val::Reg(regs.get(r)),
                Operand::Int(i) => Val::Imm(*i as u64),
                Operand::Null => Val::Imm(0),
                Operand::Global(g) => match gaddr.get(g) {
                    Some(a) => Val::Imm(*a),
                    None => Val::Imm(fidx.get(g.as_str()).map_or(0, |i| func_value(*i))),
                },
            };
            let op = match inst {
                Inst::Alloca { dst, ty, size } => {
                    let size = size.unwrap_or(module.types.get(*ty).size);
                    let slot = meta
                        .and_then(|m| m.slots.iter().position(|s| s.site as usize == index))
                        .filter(|_| rt.config.dedicated_frames())
                        .map(|s| s as u32);
                    if slot.is_some() {
                        slot_sizes.push(size);
                    }
                    allocas.push(AllocaInfo {
                        size,
                        static_id: objects.at_site(&f.name, index).expect("alloca site").0,
                        slot,
                    });
                    Op::Alloca {
                        dst: regs.get(dst),
                        slot: allocas.len() as u32 - 1,
                    }
                }
                Inst::Malloc { dst, size } => Op::Malloc {
                    size: val(size, &mut regs),
                    dst: regs.get(dst),
                    site: objects.at_site(&f.name, index).expect("malloc site").0,
                },
                Inst::Copy { dst, src } | Inst::Cast { dst, src, .. } => Op::Move {
                    src: val(src, &mut regs),
                    dst: regs.get(dst),
                },
                Inst::Load { dst, addr } => Op::Load {
                    addr: val(addr, &mut regs),
                    dst: regs.get(dst),
                },
                Inst::Store { addr, value } => Op::Store {
                    addr: val(addr, &mut regs),
                    value: val(value, &mut regs),
                },
                Inst::Phi { dst, incoming } => Op::Phi {
                    incoming: incoming.iter().map(|(v, l)| (block_ix[l.as_str()], val(v, &mut regs))).collect(),
                    dst: regs.get(dst),
                },
                Inst::Field { dst, ty, base, path } => {
                    let rp = module.types.resolve_path(*ty, path).expect("validated path");
                    Op::Field {
                        base: val(base, &mut regs),
                        offset: rp.const_offset,
                        dynamic: rp.dynamic.iter().map(|(r, s)| (Val::Reg(regs.get(r)), *s)).collect(),
                        dst: regs.get(dst),
                    }
                }
                Inst::Call { dst, callee, args } => match callee {
                    Operand::Global(g) if g == FREE_INTRINSIC => Op::Free {
                        ptr: val(&args[0], &mut regs),
                    },
                    Operand::Global(g) if g == PRINT_INTRINSIC => Op::Print {
                        value: val(&args[0], &mut regs),
                    },
                    _ => {
                        debug_assert!(!matches!(callee, Operand::Global(g) if is_intrinsic(g)));
                        Op::Call {
                            callee: val(callee, &mut regs),
                            args: args.iter().map(|a| val(a, &mut regs)).collect(),
                            dst: dst.as_ref().map(|d| regs.get(d)),
                        }
                    }
                },
                Inst::Ret { value } => Op::Ret {
                    value: value.as_ref().map(|v| val(v, &mut regs)),
                },
                Inst::Arith { dst, op, lhs, rhs } => Op::Arith {
                    lhs: val(lhs, &mut regs),
                    rhs: val(rhs, &mut regs),
                    op: *op,
                    dst: regs.get(dst),
                },
                Inst::Br {
                    cond,
                    then_label,
                    else_label,
                } => Op::Br {
                    cond: val(cond, &mut regs),
                    then_pc: block_pc[then_label.as_str()],
                    else_pc: block_pc[else_label.as_str()],
                },
                Inst::Jmp { target } => Op::Jmp {
                    pc: block_pc[target.as_str()],
                },
            };
            code.push(op);
        }
        funcs.push(LFunc {
            name: f.name.clone(),
            id: fid as u32,
            params,
            regs: regs.names,
            code,
            block_of,
            allocas,
            slot_sizes,
        });
    }

    let function_static = module
        .functions
        .iter()
        .map(|f| &f.name)
        .chain(module.externs.iter())
        .map(|n| objects.named(n).expect("function object").0)
        .collect();
    let mut globals_static: Vec<(u64, u64, u32)> = module
        .globals
        .iter()
        .map(|g| {
            (
                gaddr[&g.name],
                module.types.get(g.ty).size.max(1),
                objects.named(&g.name).expect("global object").0,
            )
        })
        .collect();
    globals_static.sort_unstable();
    Program {
        entry: fidx.get(module.entry.as_str()).copied(),
        funcs,
        externs: module.externs.len(),
        function_static,
        globals_static,
    }
}

struct FrameInfo {
    /// (address, size, static id) of each alloca of the activation.
    allocas: Vec<(u64, u64, u32)>,
}

enum Stop {
    Trap(TrapKind, u64),
}

struct Thread<'a> {
    rt: &'a Runtime,
    prog: &'a Program,
    observer: Option<&'a dyn Observer>,
    tid: usize,
    native_top: u64,
    frames: Vec<FrameInfo>,
    steps: u64,
    output: Vec<i64>,
    stale_reads: u64,
    stale_writes: u64,
    stale_samples: Vec<StaleAccess>,
    /// Function and pc of the instruction being executed.
    at: (usize, usize),
}

impl<'a> Thread<'a> {
    fn resolve(&self, addr: u64) -> Option<Target> {
        let at = |static_id: u32, start: u64| Target {
            static_id,
            offset: addr - start,
        };
        match region_of(addr) {
            Some(Region::Heap) => self.rt.registry.lookup(addr).map(|r| at(r.static_id, r.start)),
            Some(Region::Global) => {
                let i = self.prog.globals_static.partition_point(|g| g.0 <= addr).checked_sub(1)?;
                let (a, size, id) = self.prog.globals_static[i];
                (addr < a + size).then(|| at(id, a))
            }
            Some(Region::NativeStack(_) | Region::DedicatedStack(_)) => self
                .frames
                .iter()
                .rev()
                .flat_map(|f| f.allocas.iter())
                .find(|(a, size, _)| (*a..*a + (*size).max(1)).contains(&addr))
                .map(|(a, _, id)| at(*id, *a)),
            None => {
                let rel = addr.checked_sub(FUNCTION_BASE)?;
                let i = (rel / FUNCTION_STRIDE) as usize;
                (rel % FUNCTION_STRIDE == 0 && i < self.prog.function_static.len())
                    .then(|| at(self.prog.function_static[i], addr))
            }
        }
    }

    fn observe_def(&self, f: &LFunc, reg: u32, v: u64) {
        if let Some(o) = self.observer {
            if let Some(t) = self.resolve(v) {
                o.on_def(&f.name, &f.regs[reg as usize], t);
            }
        }
    }

    /// Validate an access; records stale heap accesses and lets them proceed.
    fn check(&mut self, addr: u64, write: bool, value: u64) -> Result<(), Stop> {
        if addr < memory::NULL_PAGE {
            return Err(Stop::Trap(TrapKind::NullDeref, addr));
        }
        if addr % WORD != 0 {
            return Err(Stop::Trap(TrapKind::Misaligned, addr));
        }
        let ok = match region_of(addr) {
            Some(Region::Global) => addr < self.rt.globals_end(),
            Some(Region::Heap) => {
                if self.rt.registry.lookup(addr).is_some() {
                    true
                } else if addr < self.rt.heap.high_water() {
                    self.stale(addr, write, value);
                    true
                } else {
                    false
                }
            }
            Some(Region::NativeStack(t) | Region::DedicatedStack(t)) => t < self.rt.config.threads,
            None => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Stop::Trap(TrapKind::Unmapped, addr))
        }
    }

    fn stale(&mut self, addr: u64, write: bool, value: u64) {
        if write {
            self.stale_writes += 1;
        } else {
            self.stale_reads += 1;
        }
        if self.stale_samples.len() < STALE_SAMPLES {
            let (f, pc) = self.at;
            self.stale_samples.push(StaleAccess {
                thread: self.tid,
                write,
                func: self.prog.funcs[f].name.clone(),
                index: pc,
                addr,
                value,
            });
        }
    }

    fn call(&mut self, fi: usize, args: &[u64], depth: usize) -> Result<u64, Stop> {
        if depth > MAX_CALL_DEPTH {
            return Err(Stop::Trap(TrapKind::CallDepth, 0));
        }
        let prog = self.prog;
        let f = &prog.funcs[fi];
        let mut regs = vec![0u64; f.regs.len()];
        for (p, a) in f.params.iter().zip(args) {
            regs[*p as usize] = *a;
            self.observe_def(f, *p, *a);
        }

        // Frame layout: tracked slots on the dedicated stack, the rest on
        // the native stack.
        let saved_top = self.native_top;
        let dedicated = if f.slot_sizes.is_empty() {
            None
        } else {
            match self.rt.on_frame_enter(self.tid, f.id, &f.slot_sizes) {
                Ok(d) => Some(d),
                Err(_) => return Err(Stop::Trap(TrapKind::StackOverflow, 0)),
            }
        };
        let limit = NATIVE_STACK_BASE + (self.tid as u64 + 1) * STACK_REGION;
        let mut allocas = Vec::with_capacity(f.allocas.len());
        for a in &f.allocas {
            let addr = match (a.slot, &dedicated) {
                (Some(s), Some((_, slots))) => slots[s as usize].addr,
                _ => {
                    let addr = self.native_top;
                    let len = memory::round_up(a.size.max(1));
                    if addr + len > limit {
                        self.native_top = saved_top;
                        return Err(Stop::Trap(TrapKind::StackOverflow, addr));
                    }
                    self.rt.memory.zero(addr, len);
                    self.native_top += len;
                    addr
                }
            };
            allocas.push((addr, a.size, a.static_id));
        }
        self.frames.push(FrameInfo { allocas });

        let result = self.exec(fi, &mut regs, depth);

        self.frames.pop();
        self.native_top = saved_top;
        if let Some((token, _)) = dedicated {
            let _ = self.rt.on_frame_exit(self.tid, f.id, token);
        }
        result
    }

    fn exec(&mut self, fi: usize, regs: &mut [u64], depth: usize) -> Result<u64, Stop> {
        let prog = self.prog;
        let f = &prog.funcs[fi];
        let v = |regs: &[u64], x: Val| match x {
            Val::Reg(r) => regs[r as usize],
            Val::Imm(i) => i,
        };
        let mut pc = 0usize;
        let mut prev_block = u32::MAX;
        loop {
            self.at = (fi, pc);
            self.steps += 1;
            if self.steps > self.rt.config.step_limit {
                return Err(Stop::Trap(TrapKind::StepLimit, 0));
            }
            let Some(op) = f.code.get(pc) else {
                return Ok(0);
            };
            let mut next = pc + 1;
            match op {
                Op::Alloca { dst, slot } => {
                    let a = self.frames.last().unwrap().allocas[*slot as usize].0;
                    regs[*dst as usize] = a;
                    self.observe_def(f, *dst, a);
                }
                Op::Malloc { dst, size, site } => {
                    let a = self.rt.on_alloc(*site, v(regs, *size)).map_err(|k| Stop::Trap(k, 0))?;
                    regs[*dst as usize] = a;
                    self.observe_def(f, *dst, a);
                }
                Op::Move { dst, src } => {
                    let x = v(regs, *src);
                    regs[*dst as usize] = x;
                    self.observe_def(f, *dst, x);
                }
                Op::Load { dst, addr } => {
                    let a = v(regs, *addr);
                    let x = self.rt.memory.load(a);
                    self.check(a, false, x)?;
                    regs[*dst as usize] = x;
                    self.observe_def(f, *dst, x);
                }
                Op::Store { addr, value } => {
                    let a = v(regs, *addr);
                    let x = v(regs, *value);
                    self.check(a, true, x)?;
                    self.rt.memory.store(a, x);
                    if let Some(o) = self.observer {
                        if let (Some(c), Some(t)) = (self.resolve(a), self.resolve(x)) {
                            o.on_store(c, t);
                        }
                    }
                }
                Op::Phi { dst, incoming } => {
                    let Some((_, x)) = incoming.iter().find(|(b, _)| *b == prev_block) else {
                        return Err(Stop::Trap(TrapKind::MissingPhiInput, 0));
                    };
                    let x = v(regs, *x);
                    regs[*dst as usize] = x;
                    self.observe_def(f, *dst, x);
                }
                Op::Field {
                    dst,
                    base,
                    offset,
                    dynamic,
                } => {
                    let mut a = v(regs, *base).wrapping_add(*offset);
                    for (i, stride) in dynamic {
                        a = a.wrapping_add(v(regs, *i).wrapping_mul(*stride));
                    }
                    regs[*dst as usize] = a;
                    self.observe_def(f, *dst, a);
                }
                Op::Call { dst, callee, args } => {
                    let c = v(regs, *callee);
                    let argv: Vec<u64> = args.iter().map(|a| v(regs, *a)).collect();
                    let rel = c.wrapping_sub(FUNCTION_BASE);
                    let target = (rel % FUNCTION_STRIDE == 0).then_some((rel / FUNCTION_STRIDE) as usize);
                    let ret = match target {
                        Some(t) if t < prog.funcs.len() => {
                            if prog.funcs[t].params.len() != argv.len() {
                                return Err(Stop::Trap(TrapKind::ArityMismatch, c));
                            }
                            self.call(t, &argv, depth + 1)?
                        }
                        // External callees hand back their first argument.
                        Some(t) if t < prog.funcs.len() + prog.externs => argv.first().copied().unwrap_or(0),
                        _ => return Err(Stop::Trap(TrapKind::BadCallee, c)),
                    };
                    self.at = (fi, pc);
                    if let Some(d) = dst {
                        regs[*d as usize] = ret;
                        self.observe_def(f, *d, ret);
                    }
                }
                Op::Free { ptr } => {
                    let _ = self.rt.on_free(self.tid, v(regs, *ptr));
                }
                Op::Print { value } => self.output.push(v(regs, *value) as i64),
                Op::Ret { value } => return Ok(value.map_or(0, |x| v(regs, x))),
                Op::Arith { dst, op, lhs, rhs } => {
                    regs[*dst as usize] = op.apply(v(regs, *lhs), v(regs, *rhs));
                }
                Op::Br { cond, then_pc, else_pc } => {
                    next = if v(regs, *cond) != 0 { *then_pc } else { *else_pc } as usize;
                }
                Op::Jmp { pc: t } => next = *t as usize,
            }
            if next < f.code.len() && f.block_of[next] != f.block_of[pc] || matches!(op, Op::Br { .. } | Op::Jmp { .. }) {
                prev_block = f.block_of[pc];
            }
            pc = next;
        }
    }
}

#[derive(Default)]
struct ThreadResult {
    steps: u64,
    output: Vec<i64>,
    trap: Option<Trap>,
    stale_reads: u64,
    stale_writes: u64,
    stale_samples: Vec<StaleAccess>,
}

fn run_thread(rt: &Runtime, prog: &Program, observer: Option<&dyn Observer>, tid: usize) -> ThreadResult {
    let mut t = Thread {
        rt,
        prog,
        observer,
        tid,
        native_top: NATIVE_STACK_BASE + tid as u64 * STACK_REGION,
        frames: Vec::new(),
        steps: 0,
        output: Vec::new(),
        stale_reads: 0,
        stale_writes: 0,
        stale_samples: Vec::new(),
        at: (prog.entry.unwrap_or(0), 0),
    };
    let Some(fi) = prog.entry else {
        return ThreadResult::default();
    };
    let entry = &prog.funcs[fi];
    let mut args = vec![0u64; entry.params.len()];
    if let Some(a) = args.first_mut() {
        *a = tid as u64;
    }
    let trap = match t.call(fi, &args, 0) {
        Ok(_) => None,
        Err(Stop::Trap(kind, addr)) => Some(Trap {
            thread: tid,
            kind,
            func: prog.funcs[t.at.0].name.clone(),
            index: t.at.1,
            addr,
        }),
    };
    ThreadResult {
        steps: t.steps,
        output: t.output,
        trap,
        stale_reads: t.stale_reads,
        stale_writes: t.stale_writes,
        stale_samples: t.stale_samples,
    }
}

/// Execute `module` from its entry function on `config.threads` concurrent
/// logical threads. The entry's first parameter, if any, receives the thread
/// index; other parameters are zero.
pub fn run(module: &Module, metadata: &ObjectPointerTable, config: RuntimeConfig) -> Result<ExecutionReport, MetadataError> {
    run_with_observer(module, metadata, config, None)
}

pub fn run_with_observer(
    module: &Module,
    metadata: &ObjectPointerTable,
    config: RuntimeConfig,
    observer: Option<&dyn Observer>,
) -> Result<ExecutionReport, MetadataError> {
    metadata.check_against(module)?;
    let index_map = assign_global_indices(module);
    let globals = register_globals(module, &index_map);
    let (rt, rx) = Runtime::new(std::sync::Arc::new(metadata.clone()), globals, config);
    let objects = ObjectTable::enumerate(module);
    let prog = lower(module, &rt, &objects);

    let start = Instant::now();
    let (results, sweep) = std::thread::scope(|s| {
        let sweeper = rx.map(|rx| {
            let rt = &rt;
            std::thread::Builder::new()
                .name("sweeper".into())
                .spawn_scoped(s, move || run_sweeper(rt, rx))
                .expect("spawn sweeper")
        });
        let workers: Vec<_> = (0..config.threads)
            .map(|tid| {
                let (rt, prog) = (&rt, &prog);
                std::thread::Builder::new()
                    .name(format!("app-{tid}"))
                    .stack_size(256 << 20)
                    .spawn_scoped(s, move || run_thread(rt, prog, observer, tid))
                    .expect("spawn application thread")
            })
            .collect();
        let results: Vec<ThreadResult> = workers.into_iter().map(|h| h.join().expect("application thread")).collect();
        rt.shutdown();
        let sweep = sweeper.map(|h| h.join().expect("sweeper thread")).unwrap_or_else(SweepReport::default);
        (results, sweep)
    });
    let wall = start.elapsed();

    let mut report = ExecutionReport {
        protected: config.protected,
        stack_protection: config.dedicated_frames(),
        threads: config.threads,
        allocs: rt.allocs(),
        frees: rt.frees(),
        events: rt.events_sent(),
        faults: rt.faults(),
        peak_heap_bytes: rt.heap.peak(),
        peak_stack_bytes: rt.stacks.peak_bytes(),
        registry_overlaps: rt.registry_overlaps(),
        quarantine_violations: rt.quarantine_violations(),
        wall_time_ns: wall.as_nanos() as u64,
        sweep,
        ..Default::default()
    };
    for r in results {
        report.steps += r.steps;
        report.output.push(r.output);
        report.traps.extend(r.trap);
        report.stale_reads += r.stale_reads;
        report.stale_writes += r.stale_writes;
        report.stale_samples.extend(r.stale_samples);
    }
    report.stale_samples.truncate(STALE_SAMPLES);
    Ok(report)
}
