//! Per-object pointer tables: for every static heap object, the static
//! locations that may hold a pointer to it.

mod format;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use format::{deserialize_tables, serialize_tables, EMPTY_TABLE_LEN, FORMAT_VERSION, MAGIC};

use crate::analysis::{Loc, ObjId, ObjSource, Offset, PointerClass, PointerPartition, PointsToState, SiteKind};
use crate::ir::{Inst, Module};

/// Offset marker meaning "any pointer field of the container".
pub const ANY_POINTER_FIELD: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StaticPointerRecord {
    HeapField { container: u32, offset: u32 },
    Global { index: u32 },
    Stack { function_id: u32, slot_id: u32 },
}

/// Where ANY_POINTER_FIELD records look inside a container.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContainerLayout {
    /// False when the container has no known type; every aligned cell of
    /// the runtime object is then scanned.
    pub typed: bool,
    pub pointer_offsets: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectEntry {
    pub layout: ContainerLayout,
    pub records: Vec<StaticPointerRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalEntry {
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotEntry {
    /// Function-local instruction index of the `alloca`.
    pub site: u32,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionEntry {
    pub name: String,
    /// Indexed by slot id.
    pub slots: Vec<SlotEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectPointerTable {
    pub build_hash: u64,
    /// Keyed by static heap object id.
    pub objects: BTreeMap<u32, ObjectEntry>,
    /// Indexed by global index.
    pub globals: Vec<GlobalEntry>,
    /// Indexed by function id.
    pub functions: Vec<FunctionEntry>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetadataError {
    #[error("not a metadata file")]
    BadMagic,
    #[error("unsupported metadata version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("metadata truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed metadata: {0}")]
    Malformed(String),
    #[error("metadata does not match module: {0}")]
    Mismatch(String),
}

/// Globals sorted by name receive indices `0..N`.
pub fn assign_global_indices(module: &Module) -> BTreeMap<String, u32> {
    let mut names: Vec<&str> = module.globals.iter().map(|g| g.name.as_str()).collect();
    names.sort_unstable();
    names.into_iter().enumerate().map(|(i, n)| (n.to_string(), i as u32)).collect()
}

fn alloca_size(module: &Module, inst: &Inst) -> Option<u64> {
    match inst {
        Inst::Alloca { ty, size, .. } => Some(size.unwrap_or(module.types.get(*ty).size)),
        _ => None,
    }
}

fn offset_u32(off: u64) -> u32 {
    u32::try_from(off).ok().filter(|o| *o != ANY_POINTER_FIELD).expect("field offset fits in u32")
}

pub fn build_tables(state: &PointsToState, partition: &PointerPartition, module: &Module) -> ObjectPointerTable {
    let objects = state.objects();
    let global_index = assign_global_indices(module);

    let stack_locs: BTreeSet<ObjId> = partition.of_class(PointerClass::Stack).map(|l| l.loc.base()).collect();
    let mut slot_of: BTreeMap<ObjId, (u32, u32)> = BTreeMap::new();
    let mut functions = Vec::new();
    for (fid, f) in module.functions.iter().enumerate() {
        let mut slots = Vec::new();
        for (index, inst) in f.insts().enumerate() {
            let Some(size) = alloca_size(module, inst) else { continue };
            let o = objects.at_site(&f.name, index).expect("stack site");
            if stack_locs.contains(&o) {
                slot_of.insert(o, (fid as u32, slots.len() as u32));
                slots.push(SlotEntry {
                    site: index as u32,
                    size,
                });
            }
        }
        functions.push(FunctionEntry {
            name: f.name.clone(),
            slots,
        });
    }

    let mut globals: Vec<GlobalEntry> = module
        .globals
        .iter()
        .map(|g| GlobalEntry {
            name: g.name.clone(),
            size: module.types.get(g.ty).size,
        })
        .collect();
    globals.sort_by(|a, b| a.name.cmp(&b.name));

    let mut table: BTreeMap<u32, BTreeSet<StaticPointerRecord>> =
        objects.heap_objects().map(|o| (o.id.0, BTreeSet::new())).collect();
    for l in &partition.locations {
        let base = l.loc.base();
        let rec = match (l.class, l.loc) {
            (PointerClass::HeapResident, Loc::Obj(c)) => StaticPointerRecord::HeapField {
                container: c.0,
                offset: 0,
            },
            (PointerClass::HeapResident, Loc::Field(c, Offset::At(f))) => StaticPointerRecord::HeapField {
                container: c.0,
                offset: offset_u32(f),
            },
            (PointerClass::HeapResident, Loc::Field(c, Offset::Any)) => StaticPointerRecord::HeapField {
                container: c.0,
                offset: ANY_POINTER_FIELD,
            },
            (PointerClass::Global, _) => {
                let ObjSource::Global(name) = &objects.get(base).source else {
                    unreachable!("global location without a global base")
                };
                StaticPointerRecord::Global {
                    index: global_index[name],
                }
            }
            (PointerClass::Stack, _) => {
                let (function_id, slot_id) = slot_of[&base];
                StaticPointerRecord::Stack { function_id, slot_id }
            }
        };
        for t in &l.heap_targets {
            table.entry(t.0).or_default().insert(rec);
        }
    }

    let objects_out = table
        .into_iter()
        .map(|(id, records)| {
            let types = state.type_set(ObjId(id));
            let mut offs = BTreeSet::new();
            for t in types {
                offs.extend(module.types.get(*t).pointer_offsets().iter().map(|o| offset_u32(*o)));
            }
            let entry = ObjectEntry {
                layout: ContainerLayout {
                    typed: !types.is_empty(),
                    pointer_offsets: offs.into_iter().collect(),
                },
                records: records.into_iter().collect(),
            };
            (id, entry)
        })
        .collect();

    ObjectPointerTable {
        build_hash: module.build_hash(),
        objects: objects_out,
        globals,
        functions,
    }
}

impl ObjectPointerTable {
    pub fn records(&self, static_id: u32) -> &[StaticPointerRecord] {
        self.objects.get(&static_id).map_or(&[], |e| &e.records)
    }

    pub fn global_index(&self, name: &str) -> Option<u32> {
        self.globals.iter().position(|g| g.name == name).map(|i| i as u32)
    }

    pub fn function_id(&self, name: &str) -> Option<u32> {
        self.functions.iter().position(|f| f.name == name).map(|i| i as u32)
    }

    /// Offsets an ANY_POINTER_FIELD record expands to for a runtime object of
    /// `size` bytes.
    pub fn expand_any(&self, container: u32, size: u64) -> Vec<u64> {
        match self.objects.get(&container) {
            Some(e) if e.layout.typed => e
                .layout
                .pointer_offsets
                .iter()
                .map(|o| *o as u64)
                .filter(|o| *o < size)
                .collect(),
            _ => (0..size.div_ceil(8)).map(|i| i * 8).collect(),
        }
    }

    pub fn record_count(&self) -> usize {
        self.objects.values().map(|e| e.records.len()).sum()
    }

    /// Checks that the table was built for `module` and that every record
    /// names a heap object, a global index, or a function slot that exists.
    pub fn check_against(&self, module: &Module) -> Result<(), MetadataError> {
        let mismatch = |m: String| Err(MetadataError::Mismatch(m));
        if self.build_hash != module.build_hash() {
            return mismatch(format!(
                "build hash {:016x} differs from module hash {:016x}",
                self.build_hash,
                module.build_hash()
            ));
        }
        let objects = crate::analysis::ObjectTable::enumerate(module);
        let is_heap = |id: u32| (id as usize) < objects.len() && objects.kind(ObjId(id)) == SiteKind::Heap;
        if self.globals.len() != module.globals.len() {
            return mismatch("global count differs".into());
        }
        if self.functions.len() != module.functions.len() {
            return mismatch("function count differs".into());
        }
        for (id, e) in &self.objects {
            // Extern result objects are created during solving and may lie
            // past the enumerated ids; they have no allocation site.
            if (*id as usize) < objects.len() && !is_heap(*id) {
                return mismatch(format!("object {id} is not a heap object"));
            }
            for r in &e.records {
                let ok = match *r {
                    StaticPointerRecord::HeapField { container, .. } => self.objects.contains_key(&container),
                    StaticPointerRecord::Global { index } => (index as usize) < self.globals.len(),
                    StaticPointerRecord::Stack { function_id, slot_id } => self
                        .functions
                        .get(function_id as usize)
                        .is_some_and(|f| (slot_id as usize) < f.slots.len()),
                };
                if !ok {
                    return mismatch(format!("object {id} has a dangling record {r:?}"));
                }
            }
        }
        Ok(())
    }
}
