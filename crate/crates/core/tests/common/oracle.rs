//! Naive fixed-point reference for the first analysis stage.
//!
//! Works on string labels and sweeps every instruction of the module until
//! nothing changes, with no worklist, no constraint graph and no
//! difference propagation.

use std::collections::{BTreeMap, BTreeSet};

use danglesweep::ir::{is_intrinsic, Inst, Module, Operand};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum L {
    Obj(String),
    At(String, u64),
    Any(String),
}

impl L {
    fn label(&self) -> String {
        match self {
            L::Obj(o) => o.clone(),
            L::At(o, f) => format!("{o}.{f}"),
            L::Any(o) => format!("{o}.*"),
        }
    }

    fn base(&self) -> &str {
        match self {
            L::Obj(o) | L::At(o, _) | L::Any(o) => o,
        }
    }
}

type Set = BTreeSet<L>;

#[derive(Debug, Default)]
pub struct OracleResult {
    pub facts: BTreeMap<String, BTreeSet<String>>,
    pub types: BTreeMap<String, BTreeSet<String>>,
    pub calls: BTreeSet<(String, usize, String)>,
}

#[derive(Default)]
struct St {
    vars: BTreeMap<String, Set>,
    mem: BTreeMap<L, Set>,
    types: BTreeMap<String, BTreeSet<String>>,
    fields: BTreeMap<String, BTreeSet<u64>>,
    stars: BTreeSet<String>,
    calls: BTreeSet<(String, usize, String)>,
    changed: bool,
}

impl St {
    fn add_var(&mut self, v: &str, s: Set) {
        let e = self.vars.entry(v.to_string()).or_default();
        for l in s {
            self.changed |= e.insert(l);
        }
    }

    fn add_mem(&mut self, l: &L, s: Set) {
        let e = self.mem.entry(l.clone()).or_default();
        for x in s {
            self.changed |= e.insert(x);
        }
    }

    fn add_type(&mut self, o: &str, t: &str) {
        self.changed |= self.types.entry(o.to_string()).or_default().insert(t.to_string());
    }

    fn mem(&self, l: &L) -> Set {
        self.mem.get(l).cloned().unwrap_or_default()
    }

    fn var(&self, v: &str) -> Set {
        self.vars.get(v).cloned().unwrap_or_default()
    }

    fn read(&self, l: &L) -> Set {
        match l {
            L::Any(o) => {
                let mut s = self.mem(l);
                s.extend(self.mem(&L::Obj(o.clone())));
                for f in self.fields.get(o).into_iter().flatten() {
                    s.extend(self.mem(&L::At(o.clone(), *f)));
                }
                s
            }
            _ => self.mem(l),
        }
    }
}

fn val(m: &Module, st: &St, func: &str, op: &Operand) -> Set {
    match op {
        Operand::Reg(r) => st.var(&format!("{func}:%{r}")),
        Operand::Global(g) if m.global(g).is_some() => [L::Obj(format!("g:{g}"))].into(),
        Operand::Global(g) if m.function(g).is_some() || m.externs.contains(g) => [L::Obj(format!("f:{g}"))].into(),
        _ => Set::new(),
    }
}

pub fn stage1(m: &Module) -> OracleResult {
    // Site labels, computed independently of the library's object table.
    let mut heap = BTreeMap::new();
    let mut n = 0;
    for f in &m.functions {
        for (i, inst) in f.insts().enumerate() {
            if matches!(inst, Inst::Malloc { .. }) {
                n += 1;
                heap.insert((f.name.clone(), i), format!("o{n}"));
            }
        }
    }

    let mut st = St::default();
    for g in &m.globals {
        st.add_var(&format!("@{}", g.name), [L::Obj(format!("g:{}", g.name))].into());
        st.add_type(&format!("g:{}", g.name), m.types.name(g.ty));
    }

    loop {
        st.changed = false;
        for f in &m.functions {
            let fname = f.name.as_str();
            let reg = |r: &str| format!("{fname}:%{r}");
            for (i, inst) in f.insts().enumerate() {
                match inst {
                    Inst::Alloca { dst, ty, .. } => {
                        let o = format!("{fname}:{dst}");
                        st.add_var(&reg(dst), [L::Obj(o.clone())].into());
                        st.add_type(&o, m.types.name(*ty));
                    }
                    Inst::Malloc { dst, .. } => {
                        st.add_var(&reg(dst), [L::Obj(heap[&(f.name.clone(), i)].clone())].into());
                    }
                    Inst::Copy { dst, src } => {
                        let s = val(m, &st, fname, src);
                        st.add_var(&reg(dst), s);
                    }
                    Inst::Cast { dst, ty, src } => {
                        let s = val(m, &st, fname, src);
                        for l in &s {
                            if let L::Obj(o) = l {
                                st.add_type(o, m.types.name(*ty));
                            }
                        }
                        st.add_var(&reg(dst), s);
                    }
                    Inst::Phi { dst, incoming } => {
                        for (op, _) in incoming {
                            let s = val(m, &st, fname, op);
                            st.add_var(&reg(dst), s);
                        }
                    }
                    Inst::Load { dst, addr } => {
                        for l in val(m, &st, fname, addr) {
                            let s = st.read(&l);
                            st.add_var(&reg(dst), s);
                        }
                    }
                    Inst::Store { addr, value } => {
                        let v = val(m, &st, fname, value);
                        for l in val(m, &st, fname, addr) {
                            st.add_mem(&l, v.clone());
                        }
                    }
                    Inst::Field { dst, ty, base, path } => {
                        let off = m.types.resolve_path(*ty, path).unwrap().static_offset();
                        for l in val(m, &st, fname, base) {
                            let o = l.base().to_string();
                            let t = match (&l, off) {
                                (L::Obj(_), Some(f)) => L::At(o.clone(), f),
                                (L::At(_, g), Some(f)) => L::At(o.clone(), g + f),
                                _ => L::Any(o.clone()),
                            };
                            match &t {
                                L::At(_, f) => {
                                    st.changed |= st.fields.entry(o).or_default().insert(*f);
                                }
                                _ => st.changed |= st.stars.insert(o),
                            }
                            st.add_var(&reg(dst), [t].into());
                        }
                    }
                    Inst::Call { dst, callee, args } => {
                        if matches!(callee, Operand::Global(g) if is_intrinsic(g)) {
                            continue;
                        }
                        for l in val(m, &st, fname, callee) {
                            let L::Obj(o) = &l else { continue };
                            let Some(name) = o.strip_prefix("f:") else { continue };
                            if let Some(cf) = m.function(name) {
                                if cf.params.len() != args.len() {
                                    continue;
                                }
                                st.changed |= st.calls.insert((fname.to_string(), i, name.to_string()));
                                for (a, p) in args.iter().zip(&cf.params) {
                                    let s = val(m, &st, fname, a);
                                    st.add_var(&format!("{name}:%{p}"), s);
                                }
                                if let Some(d) = dst {
                                    let s = st.var(&format!("ret:{name}"));
                                    st.add_var(&reg(d), s);
                                }
                            } else {
                                st.changed |= st.calls.insert((fname.to_string(), i, name.to_string()));
                                if let Some(d) = dst {
                                    st.add_var(&reg(d), [L::Obj(format!("x:{fname}#{i}"))].into());
                                    for a in args {
                                        let s = val(m, &st, fname, a);
                                        st.add_var(&reg(d), s);
                                    }
                                }
                            }
                        }
                    }
                    Inst::Ret { value: Some(v) } => {
                        let s = val(m, &st, fname, v);
                        st.add_var(&format!("ret:{fname}"), s);
                    }
                    _ => {}
                }
            }
        }
        // Memory aliasing between the head, offset 0 and the star node.
        let bases: BTreeSet<String> = st.fields.keys().chain(&st.stars).cloned().collect();
        for o in bases {
            let head = L::Obj(o.clone());
            let offs: Vec<u64> = st.fields.get(&o).into_iter().flatten().copied().collect();
            if offs.contains(&0) {
                let z = L::At(o.clone(), 0);
                let (a, b) = (st.mem(&head), st.mem(&z));
                st.add_mem(&z, a);
                st.add_mem(&head, b);
            }
            if st.stars.contains(&o) {
                let star = st.mem(&L::Any(o.clone()));
                st.add_mem(&head, star.clone());
                for f in offs {
                    st.add_mem(&L::At(o.clone(), f), star.clone());
                }
            }
        }
        if !st.changed {
            break;
        }
    }

    let mut out = OracleResult {
        calls: st.calls.clone(),
        ..Default::default()
    };
    for (k, s) in &st.vars {
        if !s.is_empty() && !k.starts_with("ret:") {
            out.facts.insert(k.clone(), s.iter().map(L::label).collect());
        }
    }
    for (l, s) in &st.mem {
        if !s.is_empty() {
            out.facts.insert(l.label(), s.iter().map(L::label).collect());
        }
    }
    for (o, t) in &st.types {
        if !t.is_empty() {
            out.types.insert(o.clone(), t.clone());
        }
    }
    out
}
