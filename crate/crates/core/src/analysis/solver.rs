//! Inclusion-based worklist solver shared by both analysis stages.
//!
//! An object's head and its offset-0 field denote the same memory cell, so
//! they share contents; a variable-offset field covers the head as well as
//! every concrete field.
//!
//! Stage one applies every rule and accretes object type sets through
//! casts. Stage two reruns the rules from scratch with casts treated as
//! copies and constant field accesses filtered against the stage-one type
//! sets; objects with empty type sets are never filtered.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use super::objects::{Loc, ObjId, ObjectTable, Offset, SiteKind};
use super::{CallEdge, Diagnostic, NodeKey, PointsToState, Stage, Var};
use crate::ir::{is_intrinsic, Inst, Module, Operand, TypeId};

/// Order in which pending nodes are taken off the worklist. The fixed point
/// does not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WorklistOrder {
    #[default]
    Fifo,
    Lifo,
}

#[derive(Debug, Clone, Copy)]
enum FieldOp {
    Const(u64),
    Var,
}

struct CallSite {
    caller: String,
    index: usize,
    dst: Option<usize>,
    args: Vec<Option<usize>>,
}

pub struct Solver<'m> {
    module: &'m Module,
    stage: Stage,
    order: WorklistOrder,
    objects: ObjectTable,

    keys: Vec<NodeKey>,
    index: HashMap<NodeKey, usize>,
    pt: Vec<BTreeSet<Loc>>,
    delta: Vec<BTreeSet<Loc>>,
    succ: Vec<Vec<usize>>,
    edge_set: HashSet<(usize, usize)>,
    loads: Vec<Vec<usize>>,
    stores: Vec<Vec<usize>>,
    fields: Vec<Vec<(usize, FieldOp)>>,
    casts: Vec<Vec<TypeId>>,
    calls: Vec<Vec<usize>>,

    sites: Vec<CallSite>,
    type_sets: BTreeMap<ObjId, BTreeSet<TypeId>>,
    field_offsets: HashMap<ObjId, BTreeSet<u64>>,
    has_star: HashSet<ObjId>,
    star_readers: HashMap<ObjId, Vec<usize>>,
    call_graph: BTreeSet<CallEdge>,
    resolved: HashSet<(usize, String)>,
    diagnostics: BTreeSet<Diagnostic>,

    worklist: VecDeque<usize>,
    queued: Vec<bool>,
}

impl<'m> Solver<'m> {
    /// Stage-one solver over a fresh object table.
    pub fn stage1(module: &'m Module, order: WorklistOrder) -> Self {
        Self::new(module, Stage::One, order, ObjectTable::enumerate(module), BTreeMap::new())
    }

    /// Stage-two solver seeded with the objects and type sets of stage one.
    pub fn stage2(module: &'m Module, stage1: &PointsToState, order: WorklistOrder) -> Self {
        Self::new(
            module,
            Stage::Two,
            order,
            stage1.objects().clone(),
            stage1.type_sets().clone(),
        )
    }

    fn new(
        module: &'m Module,
        stage: Stage,
        order: WorklistOrder,
        objects: ObjectTable,
        type_sets: BTreeMap<ObjId, BTreeSet<TypeId>>,
    ) -> Self {
        let mut s = Solver {
            module,
            stage,
            order,
            objects,
            keys: Vec::new(),
            index: HashMap::new(),
            pt: Vec::new(),
            delta: Vec::new(),
            succ: Vec::new(),
            edge_set: HashSet::new(),
            loads: Vec::new(),
            stores: Vec::new(),
            fields: Vec::new(),
            casts: Vec::new(),
            calls: Vec::new(),
            sites: Vec::new(),
            type_sets,
            field_offsets: HashMap::new(),
            has_star: HashSet::new(),
            star_readers: HashMap::new(),
            call_graph: BTreeSet::new(),
            resolved: HashSet::new(),
            diagnostics: BTreeSet::new(),
            worklist: VecDeque::new(),
            queued: Vec::new(),
        };
        s.install();
        s
    }

    fn node(&mut self, key: NodeKey) -> usize {
        if let Some(&n) = self.index.get(&key) {
            return n;
        }
        let n = self.keys.len();
        self.keys.push(key.clone());
        self.index.insert(key, n);
        self.pt.push(BTreeSet::new());
        self.delta.push(BTreeSet::new());
        self.succ.push(Vec::new());
        self.loads.push(Vec::new());
        self.stores.push(Vec::new());
        self.fields.push(Vec::new());
        self.casts.push(Vec::new());
        self.calls.push(Vec::new());
        self.queued.push(false);
        n
    }

    fn var(&mut self, v: Var) -> usize {
        self.node(NodeKey::Var(v))
    }

    fn reg(&mut self, func: &str, name: &str) -> usize {
        self.var(Var::Reg {
            func: func.to_string(),
            name: name.to_string(),
        })
    }

    fn operand(&mut self, func: &str, op: &Operand) -> Option<usize> {
        match op {
            Operand::Reg(r) => Some(self.reg(func, r)),
            Operand::Global(g) if self.module.global(g).is_some() => Some(self.var(Var::Global(g.clone()))),
            Operand::Global(g) if self.module.is_function_name(g) => Some(self.var(Var::Func(g.clone()))),
            _ => None,
        }
    }

    fn add_pts<I: IntoIterator<Item = Loc>>(&mut self, n: usize, locs: I) {
        let mut grew = false;
        for l in locs {
            if self.pt[n].insert(l) {
                self.delta[n].insert(l);
                grew = true;
            }
        }
        if grew && !self.queued[n] {
            self.queued[n] = true;
            self.worklist.push_back(n);
        }
    }

    fn add_edge(&mut self, src: usize, dst: usize) {
        if src == dst || !self.edge_set.insert((src, dst)) {
            return;
        }
        self.succ[src].push(dst);
        let cur: Vec<Loc> = self.pt[src].iter().copied().collect();
        self.add_pts(dst, cur);
    }

    fn add_type(&mut self, o: ObjId, ty: TypeId) {
        self.type_sets.entry(o).or_default().insert(ty);
    }

    fn install(&mut self) {
        let m = self.module;
        for g in &m.globals {
            let o = self.objects.named(&g.name).expect("global object");
            let n = self.var(Var::Global(g.name.clone()));
            self.add_pts(n, [Loc::Obj(o)]);
            self.add_type(o, g.ty);
        }
        for name in m.functions.iter().map(|f| &f.name).chain(m.externs.iter()) {
            let o = self.objects.named(name).expect("function object");
            let n = self.var(Var::Func(name.clone()));
            self.add_pts(n, [Loc::Obj(o)]);
        }
        for f in &m.functions {
            let fname = f.name.as_str();
            for p in &f.params {
                self.reg(fname, p);
            }
            for (index, inst) in f.insts().enumerate() {
                self.install_inst(fname, index, inst);
            }
        }
    }

    fn install_inst(&mut self, fname: &str, index: usize, inst: &Inst) {
        match inst {
            Inst::Alloca { dst, ty, .. } => {
                let o = self.objects.at_site(fname, index).expect("stack site");
                let d = self.reg(fname, dst);
                self.add_pts(d, [Loc::Obj(o)]);
                self.add_type(o, *ty);
            }
            Inst::Malloc { dst, .. } => {
                let o = self.objects.at_site(fname, index).expect("heap site");
                let d = self.reg(fname, dst);
                self.add_pts(d, [Loc::Obj(o)]);
            }
            Inst::Copy { dst, src } => {
                let d = self.reg(fname, dst);
                if let Some(s) = self.operand(fname, src) {
                    self.add_edge(s, d);
                }
            }
            Inst::Cast { dst, ty, src } => {
                let d = self.reg(fname, dst);
                if let Some(s) = self.operand(fname, src) {
                    self.add_edge(s, d);
                    if self.stage == Stage::One {
                        self.casts[s].push(*ty);
                        let cur: Vec<Loc> = self.pt[s].iter().copied().collect();
                        self.apply_cast(*ty, &cur);
                    }
                }
            }
            Inst::Load { dst, addr } => {
                let d = self.reg(fname, dst);
                if let Some(a) = self.operand(fname, addr) {
                    self.loads[a].push(d);
                    let cur: Vec<Loc> = self.pt[a].iter().copied().collect();
                    for l in cur {
                        self.load_from(l, d);
                    }
                }
            }
            Inst::Store { addr, value } => {
                let (Some(a), Some(v)) = (self.operand(fname, addr), self.operand(fname, value)) else {
                    return;
                };
                self.stores[a].push(v);
                let cur: Vec<Loc> = self.pt[a].iter().copied().collect();
                for l in cur {
                    let ln = self.node(NodeKey::Loc(l));
                    self.add_edge(v, ln);
                }
            }
            Inst::Phi { dst, incoming } => {
                let d = self.reg(fname, dst);
                for (op, _) in incoming {
                    if let Some(s) = self.operand(fname, op) {
                        self.add_edge(s, d);
                    }
                }
            }
            Inst::Field { dst, ty, base, path } => {
                let d = self.reg(fname, dst);
                let resolved = self.module.types.resolve_path(*ty, path).expect("validated path");
                let op = match resolved.static_offset() {
                    Some(off) => FieldOp::Const(off),
                    None => FieldOp::Var,
                };
                if let Some(b) = self.operand(fname, base) {
                    self.fields[b].push((d, op));
                    let cur: Vec<Loc> = self.pt[b].iter().copied().collect();
                    self.apply_field(d, op, &cur);
                }
            }
            Inst::Call { dst, callee, args } => {
                if matches!(callee, Operand::Global(g) if is_intrinsic(g)) {
                    return;
                }
                let dst = dst.as_ref().map(|d| self.reg(fname, d));
                let args = args.iter().map(|a| self.operand(fname, a)).collect();
                let site = self.sites.len();
                self.sites.push(CallSite {
                    caller: fname.to_string(),
                    index,
                    dst,
                    args,
                });
                if let Some(c) = self.operand(fname, callee) {
                    self.calls[c].push(site);
                    let cur: Vec<Loc> = self.pt[c].iter().copied().collect();
                    self.apply_call(site, &cur);
                }
            }
            Inst::Ret { value: Some(v) } => {
                if let Some(s) = self.operand(fname, v) {
                    let r = self.var(Var::Ret(fname.to_string()));
                    self.add_edge(s, r);
                }
            }
            Inst::Ret { value: None } | Inst::Arith { .. } | Inst::Br { .. } | Inst::Jmp { .. } => {}
        }
    }

    fn apply_cast(&mut self, ty: TypeId, locs: &[Loc]) {
        for &l in locs {
            if let Loc::Obj(o) = l {
                self.add_type(o, ty);
            }
        }
    }

    fn load_from(&mut self, l: Loc, dst: usize) {
        match l {
            Loc::Obj(_) | Loc::Field(_, Offset::At(_)) => {
                let n = self.node(NodeKey::Loc(l));
                self.add_edge(n, dst);
            }
            Loc::Field(o, Offset::Any) => {
                // A variable-offset read sees the star node and every
                // concrete field of the base, including ones created later.
                let star = self.node(NodeKey::Loc(l));
                self.add_edge(star, dst);
                let head = self.node(NodeKey::Loc(Loc::Obj(o)));
                self.add_edge(head, dst);
                let readers = self.star_readers.entry(o).or_default();
                if readers.contains(&dst) {
                    return;
                }
                readers.push(dst);
                let offs: Vec<u64> = self.field_offsets.get(&o).into_iter().flatten().copied().collect();
                for f in offs {
                    let n = self.node(NodeKey::Loc(Loc::Field(o, Offset::At(f))));
                    self.add_edge(n, dst);
                }
            }
        }
    }

    fn field_target(&self, l: Loc, op: FieldOp) -> Option<Loc> {
        let (o, base) = match l {
            Loc::Obj(o) => (o, Some(0)),
            Loc::Field(o, Offset::At(g)) => (o, Some(g)),
            Loc::Field(o, Offset::Any) => (o, None),
        };
        let off = match (base, op) {
            (Some(b), FieldOp::Const(f)) => b + f,
            _ => return Some(Loc::Field(o, Offset::Any)),
        };
        if self.stage == Stage::Two && !self.offset_allowed(o, off) {
            return None;
        }
        Some(Loc::Field(o, Offset::At(off)))
    }

    fn offset_allowed(&self, o: ObjId, off: u64) -> bool {
        match self.type_sets.get(&o) {
            None => true,
            Some(ts) if ts.is_empty() => true,
            Some(ts) => ts.iter().any(|t| self.module.types.type_offsets(*t).contains(&off)),
        }
    }

    /// Register a field sub-object and wire it to the star node of its base.
    fn create_field(&mut self, l: Loc) {
        let Loc::Field(o, off) = l else { return };
        match off {
            Offset::At(f) => {
                if !self.field_offsets.entry(o).or_default().insert(f) {
                    return;
                }
                let n = self.node(NodeKey::Loc(l));
                if f == 0 {
                    // The head and the field at offset 0 are the same cell.
                    let head = self.node(NodeKey::Loc(Loc::Obj(o)));
                    self.add_edge(head, n);
                    self.add_edge(n, head);
                }
                if self.has_star.contains(&o) {
                    let star = self.node(NodeKey::Loc(Loc::Field(o, Offset::Any)));
                    self.add_edge(star, n);
                }
                let readers = self.star_readers.get(&o).cloned().unwrap_or_default();
                for r in readers {
                    self.add_edge(n, r);
                }
            }
            Offset::Any => {
                if !self.has_star.insert(o) {
                    return;
                }
                let star = self.node(NodeKey::Loc(l));
                let head = self.node(NodeKey::Loc(Loc::Obj(o)));
                self.add_edge(star, head);
                let offs: Vec<u64> = self.field_offsets.get(&o).into_iter().flatten().copied().collect();
                for f in offs {
                    let n = self.node(NodeKey::Loc(Loc::Field(o, Offset::At(f))));
                    self.add_edge(star, n);
                }
            }
        }
    }

    fn apply_field(&mut self, dst: usize, op: FieldOp, locs: &[Loc]) {
        for &l in locs {
            if let Some(t) = self.field_target(l, op) {
                self.create_field(t);
                self.add_pts(dst, [t]);
            }
        }
    }

    fn apply_call(&mut self, site: usize, locs: &[Loc]) {
        for &l in locs {
            if let Loc::Obj(o) = l {
                if self.objects.kind(o) == SiteKind::Function {
                    let name = match &self.objects.get(o).source {
                        super::objects::ObjSource::Function(n) => n.clone(),
                        _ => unreachable!(),
                    };
                    self.resolve(site, &name);
                }
            }
        }
    }

    /// Install the argument and return constraints for one call edge.
    fn resolve(&mut self, site: usize, callee: &str) {
        if !self.resolved.insert((site, callee.to_string())) {
            return;
        }
        let (caller, index, dst, args) = {
            let s = &self.sites[site];
            (s.caller.clone(), s.index, s.dst, s.args.clone())
        };
        let edge = CallEdge {
            caller: caller.clone(),
            index,
            callee: callee.to_string(),
        };
        match self.module.function(callee) {
            Some(f) => {
                if f.params.len() != args.len() {
                    self.diagnostics.insert(Diagnostic::ArityMismatch {
                        caller,
                        index,
                        callee: callee.to_string(),
                        expected: f.params.len(),
                        found: args.len(),
                    });
                    return;
                }
                self.call_graph.insert(edge);
                for (a, p) in args.iter().zip(&f.params) {
                    let pn = self.reg(callee, p);
                    if let Some(a) = a {
                        self.add_edge(*a, pn);
                    }
                }
                if let Some(d) = dst {
                    let r = self.var(Var::Ret(callee.to_string()));
                    self.add_edge(r, d);
                }
            }
            None => {
                self.call_graph.insert(edge);
                self.diagnostics.insert(Diagnostic::ExternalCallee {
                    caller: caller.clone(),
                    index,
                    callee: callee.to_string(),
                });
                if let Some(d) = dst {
                    let o = self.objects.extern_result(&caller, index);
                    self.add_pts(d, [Loc::Obj(o)]);
                    for a in args.into_iter().flatten() {
                        self.add_edge(a, d);
                    }
                }
            }
        }
    }

    /// Process one pending node. Returns `false` once the worklist is empty.
    pub fn step(&mut self) -> bool {
        let next = match self.order {
            WorklistOrder::Fifo => self.worklist.pop_front(),
            WorklistOrder::Lifo => self.worklist.pop_back(),
        };
        let Some(n) = next else { return false };
        self.queued[n] = false;
        let d: Vec<Loc> = std::mem::take(&mut self.delta[n]).into_iter().collect();
        if d.is_empty() {
            return true;
        }
        for dst in self.succ[n].clone() {
            self.add_pts(dst, d.iter().copied());
        }
        for dst in self.loads[n].clone() {
            for &l in &d {
                self.load_from(l, dst);
            }
        }
        for src in self.stores[n].clone() {
            for &l in &d {
                let ln = self.node(NodeKey::Loc(l));
                self.add_edge(src, ln);
            }
        }
        for (dst, op) in self.fields[n].clone() {
            self.apply_field(dst, op, &d);
        }
        if self.stage == Stage::One {
            for ty in self.casts[n].clone() {
                self.apply_cast(ty, &d);
            }
        }
        for site in self.calls[n].clone() {
            self.apply_call(site, &d);
        }
        true
    }

    /// Sizes of every points-to set and type set, for monotonicity checks.
    pub fn snapshot(&self) -> BTreeMap<NodeKey, BTreeSet<Loc>> {
        self.keys
            .iter()
            .cloned()
            .zip(self.pt.iter().cloned())
            .collect()
    }

    pub fn type_snapshot(&self) -> BTreeMap<ObjId, BTreeSet<TypeId>> {
        self.type_sets.clone()
    }

    pub fn solve(mut self) -> PointsToState {
        while self.step() {}
        self.finish()
    }

    fn finish(mut self) -> PointsToState {
        let with_edges: BTreeSet<(String, usize)> =
            self.call_graph.iter().map(|e| (e.caller.clone(), e.index)).collect();
        for s in &self.sites {
            if !with_edges.contains(&(s.caller.clone(), s.index)) {
                self.diagnostics.insert(Diagnostic::NoTargets {
                    caller: s.caller.clone(),
                    index: s.index,
                });
            }
        }
        let mut field_objects: BTreeMap<ObjId, BTreeSet<Offset>> = BTreeMap::new();
        for (o, offs) in &self.field_offsets {
            field_objects.entry(*o).or_default().extend(offs.iter().map(|f| Offset::At(*f)));
        }
        for o in &self.has_star {
            field_objects.entry(*o).or_default().insert(Offset::Any);
        }
        let pt = self.keys.into_iter().zip(self.pt).collect();
        PointsToState::new(
            self.stage,
            self.objects,
            pt,
            self.type_sets,
            field_objects,
            self.call_graph,
            self.diagnostics.into_iter().collect(),
        )
    }
}
