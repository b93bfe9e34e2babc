//! Seeded generator of small, well-typed `.lir` modules.
//!
//! Every heap, stack and global object is 32 bytes, at least as large as any
//! generated type, so typed field accesses always land inside the object
//! they started from. Only object base pointers and function addresses are
//! ever stored to memory, passed or returned; interior pointers stay local
//! and are used only as load and store addresses. Stack objects live only
//! in `main`, so no pointer outlives its frame. Frees are emitted just
//! before `main` returns. Programs may still trap at run time (for example
//! by dereferencing a never-initialized cell), which ends the run early.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{parse_module, Module};

/// Upper bound on instructions per generated module.
pub const MAX_INSTRUCTIONS: usize = 50;

const OBJECT_BYTES: u64 = 32;

const TYPE_DECLS: &str = "\
type Pair = { a: ptr, b: ptr }
type Rec = { tag: i64, p: ptr, q: ptr }
type Wrap = { head: ptr, body: Pair }
type Vec3 = { n: i64, xs: [3 x ptr] }
";

struct Shape {
    name: &'static str,
    /// Constant paths and the shape of the sub-object they reach, if any.
    paths: &'static [(&'static str, Option<usize>)],
    /// Path prefix and length of the indexable array member.
    array: Option<(&'static str, u64)>,
}

const PAIR: usize = 0;

const SHAPES: &[Shape] = &[
    Shape {
        name: "Pair",
        paths: &[(".a", None), (".b", None)],
        array: None,
    },
    Shape {
        name: "Rec",
        paths: &[(".tag", None), (".p", None), (".q", None)],
        array: None,
    },
    Shape {
        name: "Wrap",
        paths: &[(".head", None), (".body", Some(PAIR)), (".body.a", None), (".body.b", None)],
        array: None,
    },
    Shape {
        name: "Vec3",
        paths: &[(".n", None), (".xs[0]", None), (".xs[2]", None)],
        array: Some((".xs", 3)),
    },
    Shape {
        name: "[4 x ptr]",
        paths: &[("[0]", None), ("[3]", None)],
        array: Some(("", 4)),
    },
    Shape {
        name: "ptr",
        paths: &[],
        array: None,
    },
];

const GLOBAL_SHAPE: usize = 4;

#[derive(Clone, Default)]
struct Pool {
    /// Operands holding object base pointers, with their static shape.
    bases: Vec<(String, Option<usize>)>,
    /// Interior pointers, with the shape of the sub-object when known.
    cells: Vec<(String, Option<usize>)>,
    /// Operands holding function addresses, with the callee's arity.
    fns: Vec<(String, usize)>,
    /// Addresses already stored to; loads prefer them.
    written: Vec<String>,
    /// Registers holding fresh heap objects, candidates for `@free`.
    mallocs: Vec<String>,
}

struct Helper {
    name: String,
    arity: usize,
}

struct Gen {
    rng: ChaCha8Rng,
    budget: usize,
    lines: Vec<String>,
    next_reg: usize,
    next_label: usize,
    helpers: Vec<Helper>,
    has_extern: bool,
    /// Allocas are emitted only in `main`, whose frame outlives every use.
    allow_alloca: bool,
}

impl Gen {
    fn emit(&mut self, line: String) {
        self.budget -= 1;
        self.lines.push(format!("  {line}"));
    }

    fn label(&mut self, l: &str) {
        self.lines.push(format!("{l}:"));
    }

    fn reg(&mut self) -> String {
        self.next_reg += 1;
        format!("%r{}", self.next_reg)
    }

    fn pick<T: Clone>(&mut self, v: &[T]) -> T {
        v.choose(&mut self.rng).expect("non-empty choice").clone()
    }

    fn any_address(&mut self, pool: &Pool) -> String {
        if !pool.cells.is_empty() && self.rng.gen_bool(0.5) {
            self.pick(&pool.cells).0
        } else {
            self.pick(&pool.bases).0
        }
    }

    fn any_value(&mut self, pool: &Pool) -> String {
        if !pool.fns.is_empty() && self.rng.gen_bool(0.2) {
            self.pick(&pool.fns).0
        } else {
            self.pick(&pool.bases).0
        }
    }

    fn args(&mut self, pool: &Pool, n: usize) -> String {
        (0..n).map(|_| self.pick(&pool.bases).0).collect::<Vec<_>>().join(", ")
    }

    /// Emit one random operation; may use up to three instructions.
    fn op(&mut self, pool: &mut Pool, callable: usize) {
        if pool.bases.is_empty() {
            let r = self.reg();
            self.emit(format!("{r} = malloc {OBJECT_BYTES}"));
            pool.bases.push((r.clone(), None));
            pool.mallocs.push(r);
            return;
        }
        loop {
            match self.rng.gen_range(0..100) {
                0..=14 => {
                    let r = self.reg();
                    self.emit(format!("{r} = malloc {OBJECT_BYTES}"));
                    pool.bases.push((r.clone(), None));
                    pool.mallocs.push(r);
                }
                15..=21 => {
                    if !self.allow_alloca {
                        continue;
                    }
                    let s = self.rng.gen_range(0..SHAPES.len());
                    let r = self.reg();
                    self.emit(format!("{r} = alloca {}, {OBJECT_BYTES}", SHAPES[s].name));
                    pool.bases.push((r, Some(s)));
                }
                22..=31 => {
                    let (b, _) = self.pick(&pool.bases);
                    let s = self.rng.gen_range(0..SHAPES.len() - 1);
                    let r = self.reg();
                    self.emit(format!("{r} = cast {} {b}", SHAPES[s].name));
                    pool.bases.push((r, Some(s)));
                }
                32..=45 => {
                    let shaped: Vec<(String, usize)> = pool
                        .bases
                        .iter()
                        .chain(&pool.cells)
                        .filter_map(|(o, s)| s.filter(|s| !SHAPES[*s].paths.is_empty()).map(|s| (o.clone(), s)))
                        .collect();
                    if shaped.is_empty() {
                        continue;
                    }
                    let (b, s) = self.pick(&shaped);
                    let (path, inner) = self.pick(SHAPES[s].paths);
                    let r = self.reg();
                    self.emit(format!("{r} = field {} {b}, {path}", SHAPES[s].name));
                    pool.cells.push((r, inner));
                }
                46..=50 => {
                    let arrays: Vec<(String, usize)> = pool
                        .bases
                        .iter()
                        .filter_map(|(o, s)| s.filter(|s| SHAPES[*s].array.is_some()).map(|s| (o.clone(), s)))
                        .collect();
                    if arrays.is_empty() || self.budget < 3 {
                        continue;
                    }
                    let (b, s) = self.pick(&arrays);
                    let (prefix, len) = SHAPES[s].array.expect("array shape");
                    let k = self.rng.gen_range(0..len);
                    let i = self.reg();
                    self.emit(format!("{i} = add 0, {k}"));
                    let r = self.reg();
                    self.emit(format!("{r} = field {} {b}, {prefix}[{i}]", SHAPES[s].name));
                    pool.cells.push((r, None));
                }
                51..=68 => {
                    let a = self.any_address(pool);
                    let v = self.any_value(pool);
                    self.emit(format!("store {a}, {v}"));
                    pool.written.push(a);
                }
                69..=80 => {
                    let a = if !pool.written.is_empty() && self.rng.gen_bool(0.75) {
                        self.pick(&pool.written)
                    } else {
                        self.any_address(pool)
                    };
                    let r = self.reg();
                    self.emit(format!("{r} = load {a}"));
                    pool.bases.push((r, None));
                }
                81..=84 => {
                    let r = self.reg();
                    if callable > 0 && self.rng.gen_bool(0.5) {
                        let h = self.rng.gen_range(0..callable);
                        let (name, arity) = (self.helpers[h].name.clone(), self.helpers[h].arity);
                        self.emit(format!("{r} = copy @{name}"));
                        pool.fns.push((r, arity));
                    } else {
                        let (b, s) = self.pick(&pool.bases);
                        self.emit(format!("{r} = copy {b}"));
                        pool.bases.push((r, s));
                    }
                }
                85..=91 => {
                    if callable == 0 {
                        continue;
                    }
                    let h = self.rng.gen_range(0..callable);
                    let (name, arity) = (self.helpers[h].name.clone(), self.helpers[h].arity);
                    let args = self.args(pool, arity);
                    let r = self.reg();
                    self.emit(format!("{r} = call @{name}({args})"));
                    pool.bases.push((r, None));
                }
                92..=95 => {
                    if pool.fns.is_empty() {
                        continue;
                    }
                    let (f, arity) = self.pick(&pool.fns);
                    // Occasionally call with the wrong arity.
                    let n = if self.rng.gen_bool(0.9) { arity } else { 3 - arity };
                    let args = self.args(pool, n);
                    let r = self.reg();
                    self.emit(format!("{r} = call {f}({args})"));
                    pool.bases.push((r, None));
                }
                _ => {
                    if !self.has_extern {
                        continue;
                    }
                    let args = self.args(pool, 1);
                    let r = self.reg();
                    self.emit(format!("{r} = call @ext({args})"));
                    pool.bases.push((r, None));
                }
            }
            return;
        }
    }

    fn straight(&mut self, pool: &mut Pool, n: usize, reserve: usize, callable: usize) {
        for _ in 0..n {
            if self.budget <= reserve + 3 {
                break;
            }
            self.op(pool, callable);
        }
    }

    fn helper(&mut self, k: usize, globals: &[String]) {
        let arity = self.helpers[k].arity;
        let params: Vec<String> = (0..arity).map(|i| format!("%a{i}")).collect();
        self.lines.push(format!("fn @{}({}) {{", self.helpers[k].name, params.join(", ")));
        let mut pool = Pool {
            bases: params.iter().map(|p| (p.clone(), None)).chain(globals.iter().map(|g| (g.clone(), Some(GLOBAL_SHAPE)))).collect(),
            fns: self.helpers[..k].iter().map(|h| (format!("@{}", h.name), h.arity)).collect(),
            ..Default::default()
        };
        let n = self.rng.gen_range(2..=6);
        self.straight(&mut pool, n, 0, k);
        if self.rng.gen_bool(0.7) {
            let (b, _) = self.pick(&pool.bases);
            self.emit(format!("ret {b}"));
        } else {
            self.emit("ret".to_string());
        }
        self.lines.push("}".to_string());
        self.lines.push(String::new());
    }

    fn main(&mut self, globals: &[String]) {
        self.allow_alloca = true;
        self.lines.push("fn @main() {".to_string());
        self.label("entry");
        let callable = self.helpers.len();
        let mut pool = Pool {
            bases: globals.iter().map(|g| (g.clone(), Some(GLOBAL_SHAPE))).collect(),
            fns: self.helpers.iter().map(|h| (format!("@{}", h.name), h.arity)).collect(),
            ..Default::default()
        };
        // Frees and the final return.
        let reserve = 3;
        let mut diamonds = self.rng.gen_range(1..=2);
        while self.budget > reserve + 3 {
            let n = self.rng.gen_range(3..=8);
            self.straight(&mut pool, n, reserve, callable);
            if diamonds == 0 || self.budget < reserve + 12 {
                if self.budget <= reserve + 4 || self.rng.gen_bool(0.3) {
                    break;
                }
                continue;
            }
            diamonds -= 1;
            self.diamond(&mut pool, reserve, callable);
        }
        for _ in 0..self.rng.gen_range(0..=2) {
            if pool.mallocs.is_empty() || self.budget <= 1 {
                break;
            }
            let i = self.rng.gen_range(0..pool.mallocs.len());
            let r = pool.mallocs.swap_remove(i);
            self.emit(format!("call @free({r})"));
        }
        self.emit("ret".to_string());
        self.lines.push("}".to_string());
    }

    /// An if-then-else whose arms each define a base pointer merged by a phi.
    /// The branch condition is a constant, so the phi takes the shape of
    /// the arm that runs; typed accesses through it are then well-typed at
    /// run time while the other arm's object may lack the accessed field.
    fn diamond(&mut self, pool: &mut Pool, reserve: usize, callable: usize) {
        let id = self.next_label;
        self.next_label += 1;
        let (t, e, j) = (format!("then{id}"), format!("else{id}"), format!("join{id}"));
        let c = self.reg();
        let bound = self.rng.gen_range(0..=1);
        self.emit(format!("{c} = lt 0, {bound}"));
        self.emit(format!("br {c}, {t}, {e}"));
        // Room for both jumps and the phi.
        let arm_reserve = reserve + 3;
        let mut picks = Vec::new();
        for l in [&t, &e] {
            self.label(l);
            let mut arm = pool.clone();
            let n = self.rng.gen_range(1..=4);
            self.straight(&mut arm, n, arm_reserve, callable);
            let shaped: Vec<(String, Option<usize>)> = arm.bases.iter().filter(|b| b.1.is_some()).cloned().collect();
            let pick = if !shaped.is_empty() && self.rng.gen_bool(0.7) {
                self.pick(&shaped)
            } else {
                self.pick(&arm.bases)
            };
            picks.push(pick);
            self.emit(format!("jmp {j}"));
        }
        self.label(&j);
        let r = self.reg();
        self.emit(format!("{r} = phi [{}, {t}], [{}, {e}]", picks[0].0, picks[1].0));
        let taken = if bound == 1 { 0 } else { 1 };
        pool.bases.push((r.clone(), picks[taken].1));
        if let Some(sh) = picks[taken].1.filter(|s| !SHAPES[*s].paths.is_empty()) {
            if self.budget > reserve + 2 && self.rng.gen_bool(0.8) {
                let (path, inner) = self.pick(SHAPES[sh].paths);
                let f = self.reg();
                self.emit(format!("{f} = field {} {r}, {path}", SHAPES[sh].name));
                pool.cells.push((f.clone(), inner));
                let v = self.any_value(pool);
                self.emit(format!("store {f}, {v}"));
                pool.written.push(f);
            }
        }
    }
}

/// Source text of the module for `seed`.
pub fn generate_source(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nhelpers = rng.gen_range(0..=2);
    let nglobals = rng.gen_range(0..=2);
    let has_extern = rng.gen_bool(0.3);
    let helpers = (0..nhelpers)
        .map(|k| Helper {
            name: format!("h{k}"),
            arity: rng.gen_range(1..=2),
        })
        .collect();
    let mut g = Gen {
        rng,
        budget: MAX_INSTRUCTIONS,
        lines: Vec::new(),
        next_reg: 0,
        next_label: 0,
        helpers,
        has_extern,
        allow_alloca: false,
    };
    let globals: Vec<String> = (0..nglobals).map(|i| format!("@g{i}")).collect();
    let mut head = format!("; generated from seed {seed}\n{TYPE_DECLS}");
    for gl in &globals {
        head.push_str(&format!("global {gl}: {}\n", SHAPES[GLOBAL_SHAPE].name));
    }
    if has_extern {
        head.push_str("declare @ext\n");
    }
    head.push('\n');
    for k in 0..nhelpers {
        g.helper(k, &globals);
    }
    g.main(&globals);
    let mut text = head;
    text.push_str(&g.lines.join("\n"));
    text.push('\n');
    text
}

/// The parsed module for `seed`.
pub fn generate(seed: u64) -> Module {
    parse_module(&generate_source(seed)).expect("generated modules are well-formed")
}

/// Names accepted by [`workload`].
pub const WORKLOADS: &[&str] = &["alloc-heavy", "call-intensive", "pointer-dense"];

/// Source of a synthetic benchmark workload. The seed only varies the
/// iteration count, so a fixed seed fixes every event count.
pub fn workload(name: &str, seed: u64) -> Option<String> {
    let extra = seed % 8;
    let text = match name {
        "alloc-heavy" => ALLOC_HEAVY.replace("ROUNDS", &(400 + extra * 25).to_string()),
        "call-intensive" => CALL_INTENSIVE.replace("ROUNDS", &(40 + extra).to_string()),
        "pointer-dense" => POINTER_DENSE.replace("ROUNDS", &(300 + extra * 25).to_string()),
        _ => return None,
    };
    Some(text)
}

// Each thread owns eight ring slots. Every node links to its predecessor and
// passes through a helper that parks it in a stack slot; overwriting a ring
// slot frees the node stored there a round earlier.
const ALLOC_HEAVY: &str = "\
type Node = { next: ptr, val: i64 }
global @ring: [128 x ptr]

fn @touch(%n) {
  %s = alloca ptr
  store %s, %n
  %p = load %s
  %v = field Node %p, .val
  store %v, 1
  ret
}

fn @main(%tid) {
entry:
  %base = mul %tid, 8
  jmp outer
outer:
  %r = phi [0, entry], [%r2, outer_end]
  %prev0 = phi [null, entry], [%last, outer_end]
  jmp inner
inner:
  %j = phi [0, outer], [%j2, inner]
  %prev = phi [%prev0, outer], [%c, inner]
  %n = malloc 16
  %c = cast Node %n
  %nx = field Node %c, .next
  store %nx, %prev
  call @touch(%c)
  %k = add %base, %j
  %slot = field [128 x ptr] @ring, [%k]
  %old = load %slot
  call @free(%old)
  store %slot, %c
  %j2 = add %j, 1
  %more = lt %j2, 8
  br %more, inner, outer_end
outer_end:
  %last = copy %c
  %r2 = add %r, 1
  %again = lt %r2, ROUNDS
  br %again, outer, done
done:
  ret
}
";

// Binary recursion where every frame keeps the shared object in a stack slot.
const CALL_INTENSIVE: &str = "\
fn @visit(%d, %obj) {
entry:
  %s = alloca ptr
  store %s, %obj
  %z = eq %d, 0
  br %z, leaf, rec
leaf:
  %p = load %s
  %v = load %p
  ret %v
rec:
  %d1 = sub %d, 1
  %o = load %s
  %a = call @visit(%d1, %o)
  %b = call @visit(%d1, %o)
  %r = add %a, %b
  ret %r
}

fn @main(%tid) {
entry:
  jmp loop
loop:
  %i = phi [0, entry], [%i2, loop]
  %o = malloc 8
  store %o, 1
  %x = call @visit(8, %o)
  call @free(%o)
  %i2 = add %i, 1
  %more = lt %i2, ROUNDS
  br %more, loop, done
done:
  ret
}
";

// An untyped 64-cell table filled through a variable index, so every free
// scans the whole table.
const POINTER_DENSE: &str = "\
fn @main(%tid) {
entry:
  %tab = malloc 512
  jmp outer
outer:
  %r = phi [0, entry], [%r2, fill_end]
  %o = malloc 8
  jmp fill
fill:
  %j = phi [0, outer], [%j2, fill]
  %e = field [64 x ptr] %tab, [%j]
  store %e, %o
  %j2 = add %j, 1
  %more = lt %j2, 64
  br %more, fill, fill_end
fill_end:
  call @free(%o)
  %r2 = add %r, 1
  %again = lt %r2, ROUNDS
  br %again, outer, done
done:
  ret
}
";
