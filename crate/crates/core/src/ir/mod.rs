//! A small LLVM-like IR: typed allocation sites, the ten pointer-relevant
//! instruction kinds, and a handful of integer/control-flow instructions the
//! interpreter needs.

mod parse;
mod print;
pub mod types;
mod validate;

use std::fmt;

use thiserror::Error;

pub use parse::parse_module;
pub use types::{
    FieldPath, PathStep, ResolvedPath, TypeDef, TypeExpr, TypeId, TypeKind, TypeTable,
    POINTER_SIZE,
};
pub use validate::validate;

/// Built-in callee that releases a heap object.
pub const FREE_INTRINSIC: &str = "free";
/// Built-in callee that appends its argument to the output trace.
pub const PRINT_INTRINSIC: &str = "print";

pub fn is_intrinsic(name: &str) -> bool {
    name == FREE_INTRINSIC || name == PRINT_INTRINSIC
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: arity error: {msg}")]
    ArityAt { line: usize, col: usize, msg: String },
    #[error("arity error in @{func}: {msg}")]
    Arity { func: String, msg: String },
    #[error("undefined variable {name} in @{func}")]
    Undefined { func: String, name: String },
    #[error("duplicate definition of {0}")]
    Duplicate(String),
    #[error("unknown type {0}")]
    UnknownType(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("type {ty} has no field {path}")]
    UnknownField { ty: String, path: String },
    #[error("invalid module: {0}")]
    Invalid(String),
}

impl IrError {
    /// Whether the error was raised before a module could be assembled.
    pub fn is_syntax(&self) -> bool {
        matches!(self, IrError::Syntax { .. } | IrError::ArityAt { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Reg(String),
    /// A global variable or a function name.
    Global(String),
    Int(i64),
    Null,
}

impl Operand {
    pub fn reg(&self) -> Option<&str> {
        match self {
            Operand::Reg(r) => Some(r),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "%{r}"),
            Operand::Global(g) => write!(f, "@{g}"),
            Operand::Int(i) => write!(f, "{i}"),
            Operand::Null => f.write_str("null"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Lt,
    Eq,
}

impl ArithOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Sub => "sub",
            ArithOp::Mul => "mul",
            ArithOp::Lt => "lt",
            ArithOp::Eq => "eq",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Self> {
        Some(match s {
            "add" => ArithOp::Add,
            "sub" => ArithOp::Sub,
            "mul" => ArithOp::Mul,
            "lt" => ArithOp::Lt,
            "eq" => ArithOp::Eq,
            _ => return None,
        })
    }

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            ArithOp::Add => a.wrapping_add(b),
            ArithOp::Sub => a.wrapping_sub(b),
            ArithOp::Mul => a.wrapping_mul(b),
            ArithOp::Lt => ((a as i64) < (b as i64)) as u64,
            ArithOp::Eq => (a == b) as u64,
        }
    }
}

/// The pointer-analysis instruction kinds plus the non-pointer extras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstKind {
    StackGlobalAlloc,
    HeapAlloc,
    Copy,
    Cast,
    Load,
    Store,
    Phi,
    Field,
    Call,
    Ret,
    Arith,
    Branch,
    Jump,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inst {
    /// `%p = alloca T[, nbytes]`
    Alloca { dst: String, ty: TypeId, size: Option<u64> },
    /// `%p = malloc nbytes`
    Malloc { dst: String, size: Operand },
    /// `%p = copy q`
    Copy { dst: String, src: Operand },
    /// `%p = cast T q`
    Cast { dst: String, ty: TypeId, src: Operand },
    /// `%p = load q`
    Load { dst: String, addr: Operand },
    /// `store p, q` writes `q` into the cell at `p`.
    Store { addr: Operand, value: Operand },
    /// `%p = phi [q, label], [h, label]`
    Phi { dst: String, incoming: Vec<(Operand, String)> },
    /// `%p = field T q, path`
    Field { dst: String, ty: TypeId, base: Operand, path: FieldPath },
    /// `[%p =] call q(args)`
    Call { dst: Option<String>, callee: Operand, args: Vec<Operand> },
    /// `ret [p]`
    Ret { value: Option<Operand> },
    /// `%p = add|sub|mul|lt|eq a, b`
    Arith { dst: String, op: ArithOp, lhs: Operand, rhs: Operand },
    /// `br c, then, else`
    Br { cond: Operand, then_label: String, else_label: String },
    /// `jmp label`
    Jmp { target: String },
}

impl Inst {
    pub fn kind(&self) -> InstKind {
        match self {
            Inst::Alloca { .. } => InstKind::StackGlobalAlloc,
            Inst::Malloc { .. } => InstKind::HeapAlloc,
            Inst::Copy { .. } => InstKind::Copy,
            Inst::Cast { .. } => InstKind::Cast,
            Inst::Load { .. } => InstKind::Load,
            Inst::Store { .. } => InstKind::Store,
            Inst::Phi { .. } => InstKind::Phi,
            Inst::Field { .. } => InstKind::Field,
            Inst::Call { .. } => InstKind::Call,
            Inst::Ret { .. } => InstKind::Ret,
            Inst::Arith { .. } => InstKind::Arith,
            Inst::Br { .. } => InstKind::Branch,
            Inst::Jmp { .. } => InstKind::Jump,
        }
    }

    pub fn dst(&self) -> Option<&str> {
        match self {
            Inst::Alloca { dst, .. }
            | Inst::Malloc { dst, .. }
            | Inst::Copy { dst, .. }
            | Inst::Cast { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::Phi { dst, .. }
            | Inst::Field { dst, .. }
            | Inst::Arith { dst, .. } => Some(dst),
            Inst::Call { dst, .. } => dst.as_deref(),
            Inst::Store { .. } | Inst::Ret { .. } | Inst::Br { .. } | Inst::Jmp { .. } => None,
        }
    }

    /// Every operand read by the instruction, including variable field indices.
    pub fn uses(&self) -> Vec<Operand> {
        match self {
            Inst::Alloca { .. } | Inst::Jmp { .. } => Vec::new(),
            Inst::Malloc { size, .. } => vec![size.clone()],
            Inst::Copy { src, .. } | Inst::Cast { src, .. } => vec![src.clone()],
            Inst::Load { addr, .. } => vec![addr.clone()],
            Inst::Store { addr, value } => vec![addr.clone(), value.clone()],
            Inst::Phi { incoming, .. } => incoming.iter().map(|(o, _)| o.clone()).collect(),
            Inst::Field { base, path, .. } => {
                let mut v = vec![base.clone()];
                v.extend(path.index_registers().map(|r| Operand::Reg(r.to_string())));
                v
            }
            Inst::Call { callee, args, .. } => {
                let mut v = vec![callee.clone()];
                v.extend(args.iter().cloned());
                v
            }
            Inst::Ret { value } => value.iter().cloned().collect(),
            Inst::Arith { lhs, rhs, .. } => vec![lhs.clone(), rhs.clone()],
            Inst::Br { cond, .. } => vec![cond.clone()],
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self, Inst::Ret { .. } | Inst::Br { .. } | Inst::Jmp { .. })
    }

    /// `call @free(p)`
    pub fn is_free(&self) -> bool {
        matches!(self, Inst::Call { callee: Operand::Global(g), .. } if g == FREE_INTRINSIC)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub insts: Vec<Inst>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<String>,
    pub blocks: Vec<Block>,
}

impl Function {
    /// Instructions in layout order; the position is the function-local
    /// instruction index used to name sites.
    pub fn insts(&self) -> impl Iterator<Item = &Inst> {
        self.blocks.iter().flat_map(|b| b.insts.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub ty: TypeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub types: TypeTable,
    pub globals: Vec<Global>,
    /// Functions declared without a body.
    pub externs: Vec<String>,
    pub functions: Vec<Function>,
    pub entry: String,
}

impl Module {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&Global> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn is_function_name(&self, name: &str) -> bool {
        self.function(name).is_some() || self.externs.iter().any(|e| e == name)
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        print::print_module(self)
    }

    /// FNV-1a hash of the canonical text, used to pair metadata with a module.
    pub fn build_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
