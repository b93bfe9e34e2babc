//! Type table and byte layout.
//!
//! Every type is laid out once, at registration time, into absolute byte
//! offsets. Nested structs and arrays are flattened: the offset set of a
//! type is the set of leaf offsets, so a field of a field is a single
//! absolute offset.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use super::IrError;

/// Size of a pointer cell in bytes.
pub const POINTER_SIZE: u64 = 8;

/// Upper bound on array lengths accepted by the type table.
pub const MAX_ARRAY_LEN: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeId(pub u32);

impl TypeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeKind {
    Scalar,
    Pointer,
    Struct,
    Array,
    Function,
}

/// A direct member of a struct or array. Array elements are unnamed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: Option<String>,
    pub offset: u64,
    pub ty: TypeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDef {
    pub name: String,
    pub kind: TypeKind,
    pub fields: Vec<Field>,
    pub size: u64,
    pub align: u64,
    /// True when the type came from a `type` declaration in the module.
    pub declared: bool,
    offsets: BTreeSet<u64>,
    pointer_offsets: BTreeSet<u64>,
}

impl TypeDef {
    /// Flattened leaf offsets owned by this type. Scalars and pointers own `{0}`.
    pub fn offsets(&self) -> &BTreeSet<u64> {
        &self.offsets
    }

    /// Leaf offsets whose leaf type is a pointer.
    pub fn pointer_offsets(&self) -> &BTreeSet<u64> {
        &self.pointer_offsets
    }

    pub fn element(&self) -> Option<(TypeId, u64)> {
        match self.kind {
            TypeKind::Array => Some((self.fields[0].ty, self.fields.len() as u64)),
            _ => None,
        }
    }
}

/// Unresolved type syntax, as written in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeExpr {
    Named(String),
    Array(u64, Box<TypeExpr>),
    Struct(Vec<(String, TypeExpr)>),
}

impl fmt::Display for TypeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeExpr::Named(n) => f.write_str(n),
            TypeExpr::Array(len, elem) => write!(f, "[{len} x {elem}]"),
            TypeExpr::Struct(fields) => {
                f.write_str("{ ")?;
                for (i, (name, ty)) in fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{name}: {ty}")?;
                }
                f.write_str(" }")
            }
        }
    }
}

/// One step of a field path: `.name`, `[3]` or `[%i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathStep {
    Field(String),
    Index(u64),
    VarIndex(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FieldPath(pub Vec<PathStep>);

impl FieldPath {
    pub fn is_dynamic(&self) -> bool {
        self.0.iter().any(|s| matches!(s, PathStep::VarIndex(_)))
    }

    pub fn index_registers(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter_map(|s| match s {
            PathStep::VarIndex(r) => Some(r.as_str()),
            _ => None,
        })
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for step in &self.0 {
            match step {
                PathStep::Field(n) => write!(f, ".{n}")?,
                PathStep::Index(i) => write!(f, "[{i}]")?,
                PathStep::VarIndex(r) => write!(f, "[%{r}]")?,
            }
        }
        Ok(())
    }
}

/// A field path resolved against a type: a constant byte offset plus one
/// `(register, stride)` term per variable index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedPath {
    pub const_offset: u64,
    pub dynamic: Vec<(String, u64)>,
    pub target: TypeId,
}

impl ResolvedPath {
    /// The statically known offset, or `None` for a variable-offset access.
    pub fn static_offset(&self) -> Option<u64> {
        self.dynamic.is_empty().then_some(self.const_offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Decl {
    name: String,
    expr: TypeExpr,
}

/// Named and anonymous types of a module, in registration order.
#[derive(Debug, Clone)]
pub struct TypeTable {
    types: Vec<TypeDef>,
    by_name: HashMap<String, TypeId>,
    decls: Vec<Decl>,
}

impl PartialEq for TypeTable {
    fn eq(&self, other: &Self) -> bool {
        self.decls == other.decls && self.types == other.types
    }
}

const BUILTINS: &[(&str, TypeKind, u64)] = &[
    ("i8", TypeKind::Scalar, 1),
    ("i16", TypeKind::Scalar, 2),
    ("i32", TypeKind::Scalar, 4),
    ("i64", TypeKind::Scalar, 8),
    ("ptr", TypeKind::Pointer, POINTER_SIZE),
    ("fn", TypeKind::Function, POINTER_SIZE),
];

impl Default for TypeTable {
    fn default() -> Self {
        Self::new()
    }
}

impl TypeTable {
    pub fn new() -> Self {
        let mut table = TypeTable {
            types: Vec::new(),
            by_name: HashMap::new(),
            decls: Vec::new(),
        };
        for &(name, kind, size) in BUILTINS {
            let offsets: BTreeSet<u64> = [0].into();
            let pointer_offsets = if kind == TypeKind::Pointer {
                offsets.clone()
            } else {
                BTreeSet::new()
            };
            table.push(TypeDef {
                name: name.to_string(),
                kind,
                fields: Vec::new(),
                size,
                align: size,
                declared: false,
                offsets,
                pointer_offsets,
            });
        }
        table
    }

    fn push(&mut self, def: TypeDef) -> TypeId {
        let id = TypeId(self.types.len() as u32);
        self.by_name.insert(def.name.clone(), id);
        self.types.push(def);
        id
    }

    /// Register a batch of `type NAME = EXPR` declarations. Declarations may
    /// refer to each other in any order; by-value cycles are rejected.
    pub fn declare_all(&mut self, decls: Vec<(String, TypeExpr)>) -> Result<(), IrError> {
        let mut seen = BTreeSet::new();
        for (n, _) in &decls {
            if !seen.insert(n.as_str()) || self.by_name.contains_key(n) {
                return Err(IrError::Duplicate(format!("type {n}")));
            }
        }
        let pending: HashMap<String, TypeExpr> = decls.iter().cloned().collect();
        let mut visiting = Vec::new();
        for (name, expr) in &decls {
            self.declare_one(name, expr, &pending, &mut visiting)?;
            self.decls.push(Decl {
                name: name.clone(),
                expr: expr.clone(),
            });
        }
        Ok(())
    }

    fn declare_one(
        &mut self,
        name: &str,
        expr: &TypeExpr,
        pending: &HashMap<String, TypeExpr>,
        visiting: &mut Vec<String>,
    ) -> Result<TypeId, IrError> {
        if let Some(&id) = self.by_name.get(name) {
            return Ok(id);
        }
        if visiting.iter().any(|v| v == name) {
            return Err(IrError::Type(format!("type {name} contains itself by value")));
        }
        visiting.push(name.to_string());
        let def = self.layout(Some(name), expr, pending, visiting)?;
        visiting.pop();
        Ok(self.push(def))
    }

    fn resolve_expr(
        &mut self,
        expr: &TypeExpr,
        pending: &HashMap<String, TypeExpr>,
        visiting: &mut Vec<String>,
    ) -> Result<TypeId, IrError> {
        match expr {
            TypeExpr::Named(n) => {
                if let Some(&id) = self.by_name.get(n) {
                    return Ok(id);
                }
                match pending.get(n) {
                    Some(e) => {
                        let e = e.clone();
                        self.declare_one(n, &e, pending, visiting)
                    }
                    None => Err(IrError::UnknownType(n.clone())),
                }
            }
            TypeExpr::Array(..) => {
                let canonical = expr.to_string();
                if let Some(&id) = self.by_name.get(&canonical) {
                    return Ok(id);
                }
                let def = self.layout(None, expr, pending, visiting)?;
                Ok(self.push(def))
            }
            TypeExpr::Struct(_) => Err(IrError::Type(
                "anonymous struct types are only allowed in a type declaration".into(),
            )),
        }
    }

    fn layout(
        &mut self,
        name: Option<&str>,
        expr: &TypeExpr,
        pending: &HashMap<String, TypeExpr>,
        visiting: &mut Vec<String>,
    ) -> Result<TypeDef, IrError> {
        let declared = name.is_some();
        let name = name.map(str::to_string).unwrap_or_else(|| expr.to_string());
        match expr {
            TypeExpr::Named(target) => {
                // `type X = Y` is an alias with its own name.
                let id = self.resolve_expr(&TypeExpr::Named(target.clone()), pending, visiting)?;
                let mut def = self.types[id.index()].clone();
                def.name = name;
                def.declared = declared;
                Ok(def)
            }
            TypeExpr::Array(len, elem) => {
                if *len == 0 || *len > MAX_ARRAY_LEN {
                    return Err(IrError::Type(format!("array length {len} out of range")));
                }
                let elem_id = self.resolve_expr(elem, pending, visiting)?;
                let e = &self.types[elem_id.index()];
                let stride = e.size;
                let mut fields = Vec::with_capacity(*len as usize);
                let mut offsets = BTreeSet::new();
                let mut pointer_offsets = BTreeSet::new();
                for i in 0..*len {
                    let base = i * stride;
                    fields.push(Field {
                        name: None,
                        offset: base,
                        ty: elem_id,
                    });
                    offsets.extend(e.offsets.iter().map(|o| base + o));
                    pointer_offsets.extend(e.pointer_offsets.iter().map(|o| base + o));
                }
                Ok(TypeDef {
                    name,
                    kind: TypeKind::Array,
                    fields,
                    size: stride * len,
                    align: e.align,
                    declared,
                    offsets,
                    pointer_offsets,
                })
            }
            TypeExpr::Struct(members) => {
                if members.is_empty() {
                    return Err(IrError::Type(format!("struct {name} has no fields")));
                }
                let mut fields = Vec::new();
                let mut offsets = BTreeSet::new();
                let mut pointer_offsets = BTreeSet::new();
                let mut cursor = 0u64;
                let mut align = 1u64;
                for (fname, fexpr) in members {
                    if fields.iter().any(|f: &Field| f.name.as_deref() == Some(fname)) {
                        return Err(IrError::Duplicate(format!("field {name}.{fname}")));
                    }
                    let fid = self.resolve_expr(fexpr, pending, visiting)?;
                    let ft = &self.types[fid.index()];
                    cursor = cursor.div_ceil(ft.align) * ft.align;
                    align = align.max(ft.align);
                    offsets.extend(ft.offsets.iter().map(|o| cursor + o));
                    pointer_offsets.extend(ft.pointer_offsets.iter().map(|o| cursor + o));
                    fields.push(Field {
                        name: Some(fname.clone()),
                        offset: cursor,
                        ty: fid,
                    });
                    cursor += ft.size;
                }
                Ok(TypeDef {
                    name,
                    kind: TypeKind::Struct,
                    fields,
                    size: cursor.div_ceil(align) * align,
                    align,
                    declared,
                    offsets,
                    pointer_offsets,
                })
            }
        }
    }

    /// Resolve a type reference used by an instruction or global, registering
    /// anonymous array types on first use.
    pub fn intern(&mut self, expr: &TypeExpr) -> Result<TypeId, IrError> {
        self.resolve_expr(expr, &HashMap::new(), &mut Vec::new())
    }

    pub fn lookup(&self, name: &str) -> Option<TypeId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: TypeId) -> &TypeDef {
        &self.types[id.index()]
    }

    pub fn name(&self, id: TypeId) -> &str {
        &self.types[id.index()].name
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TypeId, &TypeDef)> {
        self.types
            .iter()
            .enumerate()
            .map(|(i, t)| (TypeId(i as u32), t))
    }

    /// Declarations in source order, for the pretty-printer.
    pub fn declarations(&self) -> impl Iterator<Item = (&str, &TypeExpr)> {
        self.decls.iter().map(|d| (d.name.as_str(), &d.expr))
    }

    /// The flattened offset set of a type.
    pub fn type_offsets(&self, id: TypeId) -> &BTreeSet<u64> {
        &self.types[id.index()].offsets
    }

    /// Resolve a path starting at `ty`, accepting variable indices.
    pub fn resolve_path(&self, ty: TypeId, path: &FieldPath) -> Result<ResolvedPath, IrError> {
        let mut cur = ty;
        let mut offset = 0u64;
        let mut dynamic = Vec::new();
        for step in &path.0 {
            let def = self.get(cur);
            match step {
                PathStep::Field(n) => {
                    if def.kind != TypeKind::Struct {
                        return Err(self.unknown_field(ty, path));
                    }
                    let f = def
                        .fields
                        .iter()
                        .find(|f| f.name.as_deref() == Some(n))
                        .ok_or_else(|| self.unknown_field(ty, path))?;
                    offset += f.offset;
                    cur = f.ty;
                }
                PathStep::Index(i) => {
                    let (elem, len) = def.element().ok_or_else(|| self.unknown_field(ty, path))?;
                    if *i >= len {
                        return Err(self.unknown_field(ty, path));
                    }
                    offset += i * self.get(elem).size;
                    cur = elem;
                }
                PathStep::VarIndex(r) => {
                    let (elem, _) = def.element().ok_or_else(|| self.unknown_field(ty, path))?;
                    dynamic.push((r.clone(), self.get(elem).size));
                    cur = elem;
                }
            }
        }
        Ok(ResolvedPath {
            const_offset: offset,
            dynamic,
            target: cur,
        })
    }

    /// Byte offset of a constant field path within `ty`.
    pub fn offset_of(&self, ty: TypeId, path: &FieldPath) -> Result<u64, IrError> {
        let r = self.resolve_path(ty, path)?;
        r.static_offset().ok_or_else(|| self.unknown_field(ty, path))
    }

    fn unknown_field(&self, ty: TypeId, path: &FieldPath) -> IrError {
        IrError::UnknownField {
            ty: self.name(ty).to_string(),
            path: path.to_string(),
        }
    }
}
