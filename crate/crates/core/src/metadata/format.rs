//! `.ldem` encoding. All integers are little-endian.
//!
//! ```text
//! header    "LDEM" | version: u16 | flags: u16 | build_hash: u64
//! section   byte_len: u32 | payload            (three times, in order)
//! objects   count: u32, then per object:
//!             static_id: u32 | typed: u8 | n_offsets: u32 | offsets: u32*
//!             n_records: u32 | records: (tag: u8, a: u32, b: u32)*
//! globals   count: u32, then per global: name_len: u32 | name | size: u64
//! functions count: u32, then per function:
//!             name_len: u32 | name | n_slots: u32 | (site: u32, size: u64)*
//! ```
//!
//! Record tags: 0 heap field (container, offset), 1 global (index, 0),
//! 2 stack (function id, slot id).

use super::{
    ContainerLayout, FunctionEntry, GlobalEntry, MetadataError, ObjectEntry, ObjectPointerTable, SlotEntry,
    StaticPointerRecord,
};

pub const MAGIC: &[u8; 4] = b"LDEM";
pub const FORMAT_VERSION: u16 = 1;
/// Size of a serialized table with no objects, globals, or functions.
pub const EMPTY_TABLE_LEN: usize = 16 + 3 * 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("table too large"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn section(&mut self, body: Writer) {
        self.len(body.0.len());
        self.0.extend_from_slice(&body.0);
    }
}

pub fn serialize_tables(table: &ObjectPointerTable) -> Vec<u8> {
    let mut out = Writer(Vec::new());
    out.0.extend_from_slice(MAGIC);
    out.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.0.extend_from_slice(&0u16.to_le_bytes());
    out.u64(table.build_hash);

    let mut objs = Writer(Vec::new());
    objs.len(table.objects.len());
    for (id, e) in &table.objects {
        objs.u32(*id);
        objs.u8(e.layout.typed as u8);
        objs.len(e.layout.pointer_offsets.len());
        for o in &e.layout.pointer_offsets {
            objs.u32(*o);
        }
        objs.len(e.records.len());
        for r in &e.records {
            let (tag, a, b) = match *r {
                StaticPointerRecord::HeapField { container, offset } => (0, container, offset),
                StaticPointerRecord::Global { index } => (1, index, 0),
                StaticPointerRecord::Stack { function_id, slot_id } => (2, function_id, slot_id),
            };
            objs.u8(tag);
            objs.u32(a);
            objs.u32(b);
        }
    }
    out.section(objs);

    let mut globals = Writer(Vec::new());
    globals.len(table.globals.len());
    for g in &table.globals {
        globals.str(&g.name);
        globals.u64(g.size);
    }
    out.section(globals);

    let mut funcs = Writer(Vec::new());
    funcs.len(table.functions.len());
    for f in &table.functions {
        funcs.str(&f.name);
        funcs.len(f.slots.len());
        for s in &f.slots {
            funcs.u32(s.site);
            funcs.u64(s.size);
        }
    }
    out.section(funcs);
    out.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MetadataError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or(MetadataError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, MetadataError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, MetadataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, MetadataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, MetadataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, MetadataError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| MetadataError::Malformed("name is not UTF-8".into()))
    }
    /// A length-prefixed section, read by `f` which must consume it exactly.
    fn section<T>(&mut self, f: impl FnOnce(&mut Reader<'a>) -> Result<T, MetadataError>) -> Result<T, MetadataError> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let body = self.take(n)?;
        let mut sub = Reader { buf: body, pos: 0 };
        let v = f(&mut sub).map_err(|e| match e {
            MetadataError::Truncated(_) => MetadataError::Malformed(format!("section at byte {start} overruns its length")),
            e => e,
        })?;
        if sub.pos != body.len() {
            return Err(MetadataError::Malformed(format!("section at byte {start} has trailing bytes")));
        }
        Ok(v)
    }
}

pub fn deserialize_tables(bytes: &[u8]) -> Result<ObjectPointerTable, MetadataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(MetadataError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(MetadataError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let _flags = r.u16()?;
    let build_hash = r.u64()?;

    let objects = r.section(|s| {
        let n = s.u32()?;
        let mut map = std::collections::BTreeMap::new();
        for _ in 0..n {
            let id = s.u32()?;
            let typed = match s.u8()? {
                0 => false,
                1 => true,
                t => return Err(MetadataError::Malformed(format!("bad typed flag {t}"))),
            };
            let k = s.u32()?;
            let pointer_offsets = (0..k).map(|_| s.u32()).collect::<Result<Vec<_>, _>>()?;
            let k = s.u32()?;
            let mut records = Vec::new();
            for _ in 0..k {
                let (tag, a, b) = (s.u8()?, s.u32()?, s.u32()?);
                records.push(match tag {
                    0 => StaticPointerRecord::HeapField { container: a, offset: b },
                    1 => StaticPointerRecord::Global { index: a },
                    2 => StaticPointerRecord::Stack {
                        function_id: a,
                        slot_id: b,
                    },
                    t => return Err(MetadataError::Malformed(format!("bad record tag {t}"))),
                });
            }
            let entry = ObjectEntry {
                layout: ContainerLayout { typed, pointer_offsets },
                records,
            };
            if map.insert(id, entry).is_some() {
                return Err(MetadataError::Malformed(format!("object {id} listed twice")));
            }
        }
        Ok(map)
    })?;

    let globals = r.section(|s| {
        let n = s.u32()?;
        (0..n)
            .map(|_| {
                Ok(GlobalEntry {
                    name: s.str()?,
                    size: s.u64()?,
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let functions = r.section(|s| {
        let n = s.u32()?;
        let mut v = Vec::new();
        for _ in 0..n {
            let name = s.str()?;
            let k = s.u32()?;
            let slots = (0..k)
                .map(|_| {
                    Ok(SlotEntry {
                        site: s.u32()?,
                        size: s.u64()?,
                    })
                })
                .collect::<Result<Vec<_>, MetadataError>>()?;
            v.push(FunctionEntry { name, slots });
        }
        Ok(v)
    })?;

    if r.pos != bytes.len() {
        return Err(MetadataError::Malformed("trailing bytes after last section".into()));
    }
    Ok(ObjectPointerTable {
        build_hash,
        objects,
        globals,
        functions,
    })
}
