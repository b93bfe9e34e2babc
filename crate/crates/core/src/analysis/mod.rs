//! Two-stage inclusion-based, field-sensitive points-to analysis.

mod classify;
mod facts;
pub mod objects;
mod solver;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use classify::{classify_pointers, emit_statistics, ClassifiedLocation, PointerClass, PointerPartition, StatsRecord};
pub use facts::export_facts;
pub use objects::{AbstractObject, Loc, ObjId, ObjSource, ObjectTable, Offset, SiteKind};
pub use solver::{Solver, WorklistOrder};

use crate::ir::{Module, TypeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    One,
    Two,
}

/// A top-level variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    Reg { func: String, name: String },
    Global(String),
    Func(String),
    /// The returned value of a function.
    Ret(String),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Reg { func, name } => write!(f, "{func}:%{name}"),
            Var::Global(g) => write!(f, "@{g}"),
            Var::Func(n) => write!(f, "@{n}"),
            Var::Ret(n) => write!(f, "ret:{n}"),
        }
    }
}

/// A constraint-graph node: a top-level variable or an address-taken location.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKey {
    Var(Var),
    Loc(Loc),
}

/// A resolved call edge; `index` is the caller-local instruction index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallEdge {
    pub caller: String,
    pub index: usize,
    pub callee: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Diagnostic {
    ArityMismatch {
        caller: String,
        index: usize,
        callee: String,
        expected: usize,
        found: usize,
    },
    NoTargets {
        caller: String,
        index: usize,
    },
    ExternalCallee {
        caller: String,
        index: usize,
        callee: String,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::ArityMismatch {
                caller,
                index,
                callee,
                expected,
                found,
            } => write!(
                f,
                "{caller}#{index}: call to @{callee} skipped, expects {expected} arguments, got {found}"
            ),
            Diagnostic::NoTargets { caller, index } => write!(f, "{caller}#{index}: call has no resolved callee"),
            Diagnostic::ExternalCallee { caller, index, callee } => {
                write!(f, "{caller}#{index}: external callee @{callee} modelled conservatively")
            }
        }
    }
}

/// Result of one solver stage.
#[derive(Debug, Clone)]
pub struct PointsToState {
    stage: Stage,
    objects: ObjectTable,
    pt: BTreeMap<NodeKey, BTreeSet<Loc>>,
    type_sets: BTreeMap<ObjId, BTreeSet<TypeId>>,
    field_objects: BTreeMap<ObjId, BTreeSet<Offset>>,
    call_graph: BTreeSet<CallEdge>,
    diagnostics: Vec<Diagnostic>,
}

static EMPTY_LOCS: BTreeSet<Loc> = BTreeSet::new();
static EMPTY_TYPES: BTreeSet<TypeId> = BTreeSet::new();

impl PointsToState {
    pub(crate) fn new(
        stage: Stage,
        objects: ObjectTable,
        pt: BTreeMap<NodeKey, BTreeSet<Loc>>,
        type_sets: BTreeMap<ObjId, BTreeSet<TypeId>>,
        field_objects: BTreeMap<ObjId, BTreeSet<Offset>>,
        call_graph: BTreeSet<CallEdge>,
        diagnostics: Vec<Diagnostic>,
    ) -> Self {
        PointsToState {
            stage,
            objects,
            pt,
            type_sets,
            field_objects,
            call_graph,
            diagnostics,
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn objects(&self) -> &ObjectTable {
        &self.objects
    }

    pub fn pt(&self, key: &NodeKey) -> &BTreeSet<Loc> {
        self.pt.get(key).unwrap_or(&EMPTY_LOCS)
    }

    pub fn pt_reg(&self, func: &str, name: &str) -> &BTreeSet<Loc> {
        self.pt(&NodeKey::Var(Var::Reg {
            func: func.to_string(),
            name: name.to_string(),
        }))
    }

    pub fn pt_loc(&self, loc: Loc) -> &BTreeSet<Loc> {
        self.pt(&NodeKey::Loc(loc))
    }

    /// Every node with its points-to set, including empty ones.
    pub fn iter(&self) -> impl Iterator<Item = (&NodeKey, &BTreeSet<Loc>)> {
        self.pt.iter()
    }

    pub fn type_sets(&self) -> &BTreeMap<ObjId, BTreeSet<TypeId>> {
        &self.type_sets
    }

    pub fn type_set(&self, o: ObjId) -> &BTreeSet<TypeId> {
        self.type_sets.get(&o).unwrap_or(&EMPTY_TYPES)
    }

    /// Field sub-objects created during solving, per base object.
    pub fn field_objects(&self) -> &BTreeMap<ObjId, BTreeSet<Offset>> {
        &self.field_objects
    }

    pub fn call_graph(&self) -> &BTreeSet<CallEdge> {
        &self.call_graph
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn loc_label(&self, loc: Loc) -> String {
        match loc {
            Loc::Obj(o) => self.objects.label(o).to_string(),
            Loc::Field(o, off) => format!("{}.{off}", self.objects.label(o)),
        }
    }

    pub fn node_label(&self, key: &NodeKey) -> String {
        match key {
            NodeKey::Var(v) => v.to_string(),
            NodeKey::Loc(l) => self.loc_label(*l),
        }
    }

    /// Name-keyed view of the non-empty points-to sets of registers, globals
    /// and address-taken locations.
    pub fn named_facts(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.pt
            .iter()
            .filter(|(k, s)| !s.is_empty() && !matches!(k, NodeKey::Var(Var::Func(_) | Var::Ret(_))))
            .map(|(k, s)| (self.node_label(k), s.iter().map(|l| self.loc_label(*l)).collect()))
            .collect()
    }

    /// Name-keyed view of the non-empty type sets.
    pub fn named_type_sets(&self, module: &Module) -> BTreeMap<String, BTreeSet<String>> {
        self.type_sets
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(o, s)| {
                (
                    self.objects.label(*o).to_string(),
                    s.iter().map(|t| module.types.name(*t).to_string()).collect(),
                )
            })
            .collect()
    }
}

pub fn solve_stage1(module: &Module) -> PointsToState {
    Solver::stage1(module, WorklistOrder::Fifo).solve()
}

pub fn solve_stage2(module: &Module, stage1: &PointsToState) -> PointsToState {
    Solver::stage2(module, stage1, WorklistOrder::Fifo).solve()
}

/// Call-graph edges of a solved state.
pub fn resolve_calls(state: &PointsToState) -> Vec<CallEdge> {
    state.call_graph.iter().cloned().collect()
}

/// Both stages.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub stage1: PointsToState,
    pub stage2: PointsToState,
}

pub fn analyze(module: &Module) -> Analysis {
    let stage1 = solve_stage1(module);
    let stage2 = solve_stage2(module, &stage1);
    Analysis { stage1, stage2 }
}
