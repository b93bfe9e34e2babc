use std::collections::BTreeSet;
use std::fmt::Write;

use super::{Analysis, PointsToState};
use crate::ir::Module;

fn braces(items: &BTreeSet<String>) -> String {
    format!("{{{}}}", items.iter().cloned().collect::<Vec<_>>().join(", "))
}

fn stage_facts(out: &mut String, state: &PointsToState, module: &Module) {
    for (k, v) in state.named_facts() {
        let _ = writeln!(out, "pt {k} -> {}", braces(&v));
    }
    for (k, v) in state.named_type_sets(module) {
        let _ = writeln!(out, "typeset {k} -> {}", braces(&v));
    }
    for e in state.call_graph() {
        let _ = writeln!(out, "call {}#{} -> {}", e.caller, e.index, e.callee);
    }
}

/// Line-oriented facts for both stages, sorted and byte-stable.
pub fn export_facts(analysis: &Analysis, module: &Module) -> String {
    let mut out = String::from("# stage1\n");
    stage_facts(&mut out, &analysis.stage1, module);
    out.push_str("# stage2\n");
    stage_facts(&mut out, &analysis.stage2, module);
    out
}
