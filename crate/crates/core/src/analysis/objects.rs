use std::collections::HashMap;
use std::fmt;

use crate::ir::{Inst, Module, TypeId};

/// Index of an abstract object (one per allocation site).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjId(pub u32);

impl ObjId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    Heap,
    Stack,
    Global,
    Function,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ObjSource {
    /// An `alloca` or `malloc` at `(function, instruction index)`.
    Inst { func: String, index: usize },
    Global(String),
    Function(String),
    /// The value returned by an external callee at a call site.
    ExternResult { func: String, index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractObject {
    pub id: ObjId,
    pub kind: SiteKind,
    pub source: ObjSource,
    pub label: String,
    /// Declared type for stack and global objects.
    pub decl_type: Option<TypeId>,
}

/// All abstract objects of a module. Ids are assigned in a fixed order:
/// globals, functions, externs, then allocation sites in layout order.
/// Heap sites are labelled `o1, o2, ..`, stack slots `func:reg`.
#[derive(Debug, Clone, Default)]
pub struct ObjectTable {
    objects: Vec<AbstractObject>,
    by_site: HashMap<(String, usize), ObjId>,
    by_name: HashMap<String, ObjId>,
    heap_count: usize,
}

impl ObjectTable {
    pub fn enumerate(module: &Module) -> Self {
        let mut t = ObjectTable::default();
        for g in &module.globals {
            let id = t.push(SiteKind::Global, ObjSource::Global(g.name.clone()), format!("g:{}", g.name), Some(g.ty));
            t.by_name.insert(g.name.clone(), id);
        }
        let fnames = module.functions.iter().map(|f| &f.name).chain(module.externs.iter());
        for name in fnames {
            let id = t.push(SiteKind::Function, ObjSource::Function(name.clone()), format!("f:{name}"), None);
            t.by_name.insert(name.clone(), id);
        }
        for f in &module.functions {
            for (index, inst) in f.insts().enumerate() {
                let src = ObjSource::Inst {
                    func: f.name.clone(),
                    index,
                };
                let id = match inst {
                    Inst::Alloca { dst, ty, .. } => t.push(SiteKind::Stack, src, format!("{}:{dst}", f.name), Some(*ty)),
                    Inst::Malloc { .. } => {
                        t.heap_count += 1;
                        let label = format!("o{}", t.heap_count);
                        t.push(SiteKind::Heap, src, label, None)
                    }
                    _ => continue,
                };
                t.by_site.insert((f.name.clone(), index), id);
            }
        }
        t
    }

    fn push(&mut self, kind: SiteKind, source: ObjSource, label: String, decl_type: Option<TypeId>) -> ObjId {
        let id = ObjId(self.objects.len() as u32);
        self.objects.push(AbstractObject {
            id,
            kind,
            source,
            label,
            decl_type,
        });
        id
    }

    /// The heap object standing for an external callee's result at a call site.
    pub(crate) fn extern_result(&mut self, func: &str, index: usize) -> ObjId {
        let key = (format!("{func}#ext"), index);
        if let Some(&id) = self.by_site.get(&key) {
            return id;
        }
        let id = self.push(
            SiteKind::Heap,
            ObjSource::ExternResult {
                func: func.to_string(),
                index,
            },
            format!("x:{func}#{index}"),
            None,
        );
        self.by_site.insert(key, id);
        id
    }

    /// Object allocated by the instruction at `(func, index)`.
    pub fn at_site(&self, func: &str, index: usize) -> Option<ObjId> {
        self.by_site.get(&(func.to_string(), index)).copied()
    }

    /// Object of a global variable or function.
    pub fn named(&self, name: &str) -> Option<ObjId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ObjId) -> &AbstractObject {
        &self.objects[id.index()]
    }

    pub fn kind(&self, id: ObjId) -> SiteKind {
        self.objects[id.index()].kind
    }

    pub fn label(&self, id: ObjId) -> &str {
        &self.objects[id.index()].label
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AbstractObject> {
        self.objects.iter()
    }

    pub fn heap_objects(&self) -> impl Iterator<Item = &AbstractObject> {
        self.objects.iter().filter(|o| o.kind == SiteKind::Heap)
    }
}

/// A field offset within an object, or any offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Offset {
    At(u64),
    Any,
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Offset::At(o) => write!(f, "{o}"),
            Offset::Any => f.write_str("*"),
        }
    }
}

/// An address-taken location: a whole object or one of its field sub-objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loc {
    Obj(ObjId),
    Field(ObjId, Offset),
}

impl Loc {
    pub fn base(self) -> ObjId {
        match self {
            Loc::Obj(o) | Loc::Field(o, _) => o,
        }
    }
}
