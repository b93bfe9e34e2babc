use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{Loc, NodeKey, ObjId, Offset, PointsToState, SiteKind};
use crate::ir::Module;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum PointerClass {
    HeapResident,
    Global,
    Stack,
}

/// An address-taken location that may hold a pointer to a heap object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifiedLocation {
    pub loc: Loc,
    pub class: PointerClass,
    /// Heap objects the location may point to or into.
    pub heap_targets: BTreeSet<ObjId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PointerPartition {
    pub locations: Vec<ClassifiedLocation>,
}

impl PointerPartition {
    pub fn of_class(&self, class: PointerClass) -> impl Iterator<Item = &ClassifiedLocation> {
        self.locations.iter().filter(move |l| l.class == class)
    }

    pub fn get(&self, loc: Loc) -> Option<&ClassifiedLocation> {
        self.locations.iter().find(|l| l.loc == loc)
    }
}

pub fn classify_pointers(state: &PointsToState, _module: &Module) -> PointerPartition {
    let objects = state.objects();
    let mut locations = Vec::new();
    for (key, pts) in state.iter() {
        let NodeKey::Loc(loc) = key else { continue };
        let heap_targets: BTreeSet<ObjId> = pts
            .iter()
            .map(|l| l.base())
            .filter(|o| objects.kind(*o) == SiteKind::Heap)
            .collect();
        if heap_targets.is_empty() {
            continue;
        }
        let class = match objects.kind(loc.base()) {
            SiteKind::Heap => PointerClass::HeapResident,
            SiteKind::Global => PointerClass::Global,
            SiteKind::Stack => PointerClass::Stack,
            SiteKind::Function => continue,
        };
        locations.push(ClassifiedLocation {
            loc: *loc,
            class,
            heap_targets,
        });
    }
    PointerPartition { locations }
}

/// Static counts plus optional runtime columns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StatsRecord {
    pub static_objects: usize,
    pub free_sites: usize,
    pub heap_pointers: usize,
    pub global_pointers: usize,
    pub stack_pointers: usize,
    pub runtime_allocs: Option<u64>,
    pub runtime_frees: Option<u64>,
    pub invalidated_pointers: Option<u64>,
}

impl StatsRecord {
    pub fn header() -> &'static str {
        "static_objects free_sites heap_ptrs global_ptrs stack_ptrs allocs frees invalidated"
    }

    pub fn row(&self) -> String {
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        format!(
            "{} {} {} {} {} {} {} {}",
            self.static_objects,
            self.free_sites,
            self.heap_pointers,
            self.global_pointers,
            self.stack_pointers,
            opt(self.runtime_allocs),
            opt(self.runtime_frees),
            opt(self.invalidated_pointers)
        )
    }
}

/// Heap pointers are counted as distinct (container, offset) pairs, with an
/// object head standing for offset 0; global and stack pointers as distinct
/// objects.
pub fn emit_statistics(state: &PointsToState, module: &Module) -> StatsRecord {
    let partition = classify_pointers(state, module);
    let mut heap: BTreeSet<(ObjId, Offset)> = BTreeSet::new();
    let mut by_class: BTreeMap<PointerClass, BTreeSet<ObjId>> = BTreeMap::new();
    for l in &partition.locations {
        match (l.class, l.loc) {
            (PointerClass::HeapResident, Loc::Obj(o)) => {
                heap.insert((o, Offset::At(0)));
            }
            (PointerClass::HeapResident, Loc::Field(o, off)) => {
                heap.insert((o, off));
            }
            (c, loc) => {
                by_class.entry(c).or_default().insert(loc.base());
            }
        }
    }
    let count = |c| by_class.get(&c).map_or(0, |s| s.len());
    StatsRecord {
        static_objects: state.objects().heap_objects().count(),
        free_sites: module.functions.iter().flat_map(|f| f.insts()).filter(|i| i.is_free()).count(),
        heap_pointers: heap.len(),
        global_pointers: count(PointerClass::Global),
        stack_pointers: count(PointerClass::Stack),
        ..Default::default()
    }
}
