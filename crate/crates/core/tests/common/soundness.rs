//! Records what an execution actually stored and defined, then checks the
//! records against a points-to state.

use std::collections::BTreeSet;
use std::sync::Mutex;

use danglesweep::analysis::{Loc, ObjId, Offset, PointsToState};
use danglesweep::runtime::{Observer, Target};

#[derive(Default)]
pub struct Recorder {
    pub stores: Mutex<BTreeSet<(u32, u64, u32, u64)>>,
    pub defs: Mutex<BTreeSet<(String, String, u32, u64)>>,
}

impl Observer for Recorder {
    fn on_def(&self, func: &str, reg: &str, v: Target) {
        self.defs.lock().unwrap().insert((func.to_string(), reg.to_string(), v.static_id, v.offset));
    }

    fn on_store(&self, cell: Target, v: Target) {
        self.stores.lock().unwrap().insert((cell.static_id, cell.offset, v.static_id, v.offset));
    }
}

/// Analysis locations that may stand for byte `off` of object `id`.
fn names(id: u32, off: u64) -> Vec<Loc> {
    let o = ObjId(id);
    let mut v = vec![Loc::Field(o, Offset::At(off)), Loc::Field(o, Offset::Any)];
    if off == 0 {
        v.push(Loc::Obj(o));
    }
    v
}

fn covers(set: &BTreeSet<Loc>, id: u32, off: u64) -> bool {
    names(id, off).iter().any(|l| set.contains(l))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Violations {
    pub stores: usize,
    pub defs: usize,
    pub store_facts: usize,
    pub def_facts: usize,
}

pub fn check(rec: &Recorder, state: &PointsToState) -> Violations {
    let mut v = Violations::default();
    for &(c, coff, o, ooff) in rec.stores.lock().unwrap().iter() {
        v.store_facts += 1;
        if !names(c, coff).iter().any(|l| covers(state.pt_loc(*l), o, ooff)) {
            v.stores += 1;
        }
    }
    for (f, r, o, off) in rec.defs.lock().unwrap().iter() {
        v.def_facts += 1;
        if !covers(state.pt_reg(f, r), *o, *off) {
            v.defs += 1;
        }
    }
    v
}
