use std::fmt::Write;

use super::{Inst, Module, Operand};

pub(super) fn print_module(m: &Module) -> String {
    let mut out = String::new();
    let section = |out: &mut String, body: String| {
        if body.is_empty() {
            return;
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&body);
    };

    let mut types = String::new();
    for (name, expr) in m.types.declarations() {
        let _ = writeln!(types, "type {name} = {expr}");
    }
    section(&mut out, types);

    let mut globals = String::new();
    for g in &m.globals {
        let _ = writeln!(globals, "global @{}: {}", g.name, m.types.name(g.ty));
    }
    section(&mut out, globals);

    let mut decls = String::new();
    for e in &m.externs {
        let _ = writeln!(decls, "declare @{e}");
    }
    if m.entry != "main" {
        let _ = writeln!(decls, "entry @{}", m.entry);
    }
    section(&mut out, decls);

    for f in &m.functions {
        let mut body = String::new();
        let params: Vec<String> = f.params.iter().map(|p| format!("%{p}")).collect();
        let _ = write!(body, "fn @{}({}) {{", f.name, params.join(", "));
        if f.blocks.is_empty() {
            body.push_str("}\n");
        } else {
            body.push('\n');
            for b in &f.blocks {
                let _ = writeln!(body, "{}:", b.label);
                for inst in &b.insts {
                    let _ = writeln!(body, "  {}", print_inst(m, inst));
                }
            }
            body.push_str("}\n");
        }
        section(&mut out, body);
    }
    out
}

fn join(ops: &[Operand]) -> String {
    ops.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(", ")
}

pub(super) fn print_inst(m: &Module, inst: &Inst) -> String {
    let ty = |t| m.types.name(t).to_string();
    match inst {
        Inst::Alloca { dst, ty: t, size } => match size {
            Some(n) => format!("%{dst} = alloca {}, {n}", ty(*t)),
            None => format!("%{dst} = alloca {}", ty(*t)),
        },
        Inst::Malloc { dst, size } => format!("%{dst} = malloc {size}"),
        Inst::Copy { dst, src } => format!("%{dst} = copy {src}"),
        Inst::Cast { dst, ty: t, src } => format!("%{dst} = cast {} {src}", ty(*t)),
        Inst::Load { dst, addr } => format!("%{dst} = load {addr}"),
        Inst::Store { addr, value } => format!("store {addr}, {value}"),
        Inst::Phi { dst, incoming } => {
            let parts: Vec<String> = incoming.iter().map(|(v, l)| format!("[{v}, {l}]")).collect();
            format!("%{dst} = phi {}", parts.join(", "))
        }
        Inst::Field { dst, ty: t, base, path } => format!("%{dst} = field {} {base}, {path}", ty(*t)),
        Inst::Call { dst, callee, args } => match dst {
            Some(d) => format!("%{d} = call {callee}({})", join(args)),
            None => format!("call {callee}({})", join(args)),
        },
        Inst::Ret { value } => match value {
            Some(v) => format!("ret {v}"),
            None => "ret".to_string(),
        },
        Inst::Arith { dst, op, lhs, rhs } => format!("%{dst} = {} {lhs}, {rhs}", op.mnemonic()),
        Inst::Br {
            cond,
            then_label,
            else_label,
        } => format!("br {cond}, {then_label}, {else_label}"),
        Inst::Jmp { target } => format!("jmp {target}"),
    }
}

#[cfg(test)]
mod tests {
    use crate::ir::parse_module;

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let src = r#"
; comment
type A = {arr: ptr,  n: i64}
global @g : A
declare @ext
fn @main() {
  %a = malloc 16   ; o1
  %t = cast A %a
  %f = field A %t, .arr
  %x = field [4 x ptr] %a, [%f]
  call @ext(%a, null, -3)
  ret
}
"#;
        let m = parse_module(src).unwrap();
        let text = m.to_text();
        let again = parse_module(&text).unwrap();
        assert_eq!(m, again);
        assert_eq!(text, again.to_text());
        assert!(text.contains("type A = { arr: ptr, n: i64 }\n"));
        assert!(text.contains("  %x = field [4 x ptr] %a, [%f]\n"));
    }

    #[test]
    fn non_main_entry_is_printed() {
        let m = parse_module("entry @start\nfn @start() {\n  ret\n}\n").unwrap();
        assert!(m.to_text().contains("entry @start\n"));
        assert_eq!(parse_module(&m.to_text()).unwrap(), m);
    }
}
