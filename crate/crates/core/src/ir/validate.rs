use std::collections::{HashMap, HashSet};

use super::{is_intrinsic, Function, Inst, IrError, Module, Operand, FREE_INTRINSIC, PRINT_INTRINSIC};

/// Structural checks: unique names, defined operands, Table-2 arities,
/// resolvable field paths and well-formed blocks.
pub fn validate(m: &Module) -> Result<(), IrError> {
    let mut names = HashSet::new();
    for g in &m.globals {
        if !names.insert(g.name.as_str()) {
            return Err(IrError::Duplicate(format!("@{}", g.name)));
        }
    }
    for name in m.externs.iter().chain(m.functions.iter().map(|f| &f.name)) {
        if is_intrinsic(name) || !names.insert(name.as_str()) {
            return Err(IrError::Duplicate(format!("@{name}")));
        }
    }
    // A module without functions has nothing to enter; it still analyzes.
    if !m.functions.is_empty() && m.function(&m.entry).is_none() {
        return Err(IrError::Invalid(format!("entry function @{} is not defined", m.entry)));
    }
    for f in &m.functions {
        validate_function(m, f)?;
    }
    Ok(())
}

fn validate_function(m: &Module, f: &Function) -> Result<(), IrError> {
    let fname = &f.name;
    let mut regs: HashSet<&str> = HashSet::new();
    for p in &f.params {
        if !regs.insert(p) {
            return Err(IrError::Duplicate(format!("%{p} in @{fname}")));
        }
    }
    let mut labels = HashMap::new();
    for (i, b) in f.blocks.iter().enumerate() {
        if labels.insert(b.label.as_str(), i).is_some() {
            return Err(IrError::Duplicate(format!("label {} in @{fname}", b.label)));
        }
    }
    for inst in f.insts() {
        if let Some(d) = inst.dst() {
            if !regs.insert(d) {
                return Err(IrError::Duplicate(format!("%{d} in @{fname}")));
            }
        }
    }
    let invalid = |msg: String| IrError::Invalid(format!("@{fname}: {msg}"));
    let arity = |msg: String| IrError::Arity {
        func: fname.clone(),
        msg,
    };

    for b in &f.blocks {
        match b.insts.last() {
            Some(t) if t.is_terminator() => {}
            _ => return Err(invalid(format!("block {} does not end in a terminator", b.label))),
        }
        if b.insts[..b.insts.len() - 1].iter().any(Inst::is_terminator) {
            return Err(invalid(format!("terminator in the middle of block {}", b.label)));
        }
        for inst in &b.insts {
            for op in inst.uses() {
                check_operand(m, f, &regs, &op, inst)?;
            }
            match inst {
                Inst::Phi { incoming, .. } => {
                    if incoming.len() != 2 {
                        return Err(arity(format!("phi takes 2 inputs, found {}", incoming.len())));
                    }
                    for (_, l) in incoming {
                        if !labels.contains_key(l.as_str()) {
                            return Err(invalid(format!("phi names unknown block {l}")));
                        }
                    }
                }
                Inst::Br {
                    then_label,
                    else_label,
                    ..
                } => {
                    for l in [then_label, else_label] {
                        if !labels.contains_key(l.as_str()) {
                            return Err(invalid(format!("branch to unknown block {l}")));
                        }
                    }
                }
                Inst::Jmp { target } => {
                    if !labels.contains_key(target.as_str()) {
                        return Err(invalid(format!("jump to unknown block {target}")));
                    }
                }
                Inst::Field { ty, path, .. } => {
                    m.types.resolve_path(*ty, path)?;
                }
                Inst::Alloca { size: Some(0), .. } => {
                    return Err(invalid("alloca of zero bytes".into()));
                }
                Inst::Call {
                    callee: Operand::Global(g),
                    args,
                    dst,
                } if is_intrinsic(g) => {
                    if args.len() != 1 {
                        return Err(arity(format!("@{g} takes 1 argument, found {}", args.len())));
                    }
                    if g == FREE_INTRINSIC && dst.is_some() {
                        return Err(invalid("@free has no result".into()));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn check_operand(
    m: &Module,
    f: &Function,
    regs: &HashSet<&str>,
    op: &Operand,
    inst: &Inst,
) -> Result<(), IrError> {
    let undefined = |name: String| IrError::Undefined {
        func: f.name.clone(),
        name,
    };
    match op {
        Operand::Reg(r) if !regs.contains(r.as_str()) => Err(undefined(format!("%{r}"))),
        Operand::Global(g) if is_intrinsic(g) => {
            // Intrinsics are only usable as direct callees.
            match inst {
                Inst::Call {
                    callee: Operand::Global(c),
                    args,
                    ..
                } if c == g && !args.iter().any(|a| a == op) => Ok(()),
                _ => Err(IrError::Invalid(format!(
                    "@{}: @{g} used as a value (only @{FREE_INTRINSIC} and @{PRINT_INTRINSIC} calls are allowed)",
                    f.name
                ))),
            }
        }
        Operand::Global(g) if m.global(g).is_none() && !m.is_function_name(g) => {
            Err(undefined(format!("@{g}")))
        }
        _ => Ok(()),
    }
}
