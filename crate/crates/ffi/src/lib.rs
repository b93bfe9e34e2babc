//! C interface to the analysis, metadata and runtime pipeline.
//!
//! Every function returns a [`DsStatus`]. On failure a message is kept per
//! thread and can be read with [`ds_last_error`]. Panics never cross the
//! boundary; they surface as [`DsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use danglesweep::analysis::export_facts;
use danglesweep::ir::{parse_module, Module};
use danglesweep::metadata::{deserialize_tables, serialize_tables};
use danglesweep::pipeline::{check_uaf, compile, Verdict};
use danglesweep::runtime::{run, RuntimeConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Validation = 4,
    Metadata = 5,
    Config = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsVerdict {
    Prevented = 0,
    NotPrevented = 1,
    NotApplicable = 2,
}

/// A parsed and validated module.
pub struct DsModule {
    module: Module,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DsStats {
    pub static_objects: u64,
    pub free_sites: u64,
    pub heap_pointers: u64,
    pub global_pointers: u64,
    pub stack_pointers: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsRunOptions {
    pub protect: bool,
    pub stack_protection: bool,
    pub sync_sweep: bool,
    pub threads: u32,
    /// Zero keeps the default limit.
    pub step_limit: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DsRunSummary {
    pub steps: u64,
    pub allocs: u64,
    pub frees: u64,
    pub traps: u64,
    pub null_traps: u64,
    pub faults: u64,
    pub stale_reads: u64,
    pub stale_writes: u64,
    pub nullified: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DsStatus, msg: impl Into<String>) -> DsStatus {
    set_error(msg.into());
    status
}

/// Run `f`, turning a panic into [`DsStatus::Panic`].
fn guard(f: impl FnOnce() -> DsStatus) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DsStatus::Panic, msg)
        }
    }
}

/// Message for the last failure on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parse and validate NUL-terminated `.lir` source.
///
/// # Safety
/// `source` must be a valid NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_module_parse(source: *const c_char, out: *mut *mut DsModule) -> DsStatus {
    guard(|| {
        if source.is_null() || out.is_null() {
            return fail(DsStatus::NullArgument, "null argument");
        }
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let Ok(text) = unsafe { CStr::from_ptr(source) }.to_str() else {
            return fail(DsStatus::InvalidUtf8, "source is not UTF-8");
        };
        match parse_module(text) {
            Ok(module) => {
                // SAFETY: checked non-null; the caller guarantees it is writable.
                unsafe { *out = Box::into_raw(Box::new(DsModule { module })) };
                DsStatus::Ok
            }
            Err(e) if e.is_syntax() => fail(DsStatus::Parse, e.to_string()),
            Err(e) => fail(DsStatus::Validation, e.to_string()),
        }
    })
}

/// # Safety
/// `module` must come from [`ds_module_parse`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn ds_module_free(module: *mut DsModule) {
    if !module.is_null() {
        // SAFETY: the caller hands back ownership of a box we created.
        drop(unsafe { Box::from_raw(module) });
    }
}

/// # Safety
/// `s` must come from this library and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn ds_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: created by CString::into_raw below.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// # Safety
/// `bytes` and `len` must come from [`ds_metadata_emit`], or `bytes` be null.
#[no_mangle]
pub unsafe extern "C" fn ds_bytes_free(bytes: *mut u8, len: usize) {
    if !bytes.is_null() {
        // SAFETY: created from a boxed slice of exactly `len` bytes.
        drop(unsafe { Box::from_raw(ptr::slice_from_raw_parts_mut(bytes, len)) });
    }
}

unsafe fn module_ref<'a>(module: *const DsModule) -> Option<&'a Module> {
    // SAFETY: the caller guarantees a live handle or null.
    unsafe { module.as_ref() }.map(|m| &m.module)
}

/// Points-to facts of both stages as text; free with [`ds_string_free`].
///
/// # Safety
/// `module` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_analyze_facts(module: *const DsModule, out: *mut *mut c_char) -> DsStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantee.
        let Some(m) = (unsafe { module_ref(module) }) else {
            return fail(DsStatus::NullArgument, "null module");
        };
        if out.is_null() {
            return fail(DsStatus::NullArgument, "null output");
        }
        let facts = export_facts(&compile(m).analysis, m);
        let c = CString::new(facts).expect("facts contain no NUL");
        // SAFETY: checked non-null.
        unsafe { *out = c.into_raw() };
        DsStatus::Ok
    })
}

/// Serialized metadata tables; free with [`ds_bytes_free`].
///
/// # Safety
/// `module` must be a live handle; `out` and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_metadata_emit(module: *const DsModule, out: *mut *mut u8, out_len: *mut usize) -> DsStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantee.
        let Some(m) = (unsafe { module_ref(module) }) else {
            return fail(DsStatus::NullArgument, "null module");
        };
        if out.is_null() || out_len.is_null() {
            return fail(DsStatus::NullArgument, "null output");
        }
        let bytes = serialize_tables(&compile(m).table).into_boxed_slice();
        let len = bytes.len();
        // SAFETY: checked non-null.
        unsafe {
            *out_len = len;
            *out = Box::into_raw(bytes).cast::<u8>();
        }
        DsStatus::Ok
    })
}

/// Check that `bytes` is a well-formed metadata file built for `module`.
///
/// # Safety
/// `module` must be a live handle and `bytes` readable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_metadata_check(module: *const DsModule, bytes: *const u8, len: usize) -> DsStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantee.
        let Some(m) = (unsafe { module_ref(module) }) else {
            return fail(DsStatus::NullArgument, "null module");
        };
        if bytes.is_null() {
            return fail(DsStatus::NullArgument, "null bytes");
        }
        // SAFETY: the caller guarantees `len` readable bytes.
        let data = unsafe { std::slice::from_raw_parts(bytes, len) };
        match deserialize_tables(data).and_then(|t| t.check_against(m)) {
            Ok(()) => DsStatus::Ok,
            Err(e) => fail(DsStatus::Metadata, e.to_string()),
        }
    })
}

/// # Safety
/// `module` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_stats(module: *const DsModule, out: *mut DsStats) -> DsStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantee.
        let Some(m) = (unsafe { module_ref(module) }) else {
            return fail(DsStatus::NullArgument, "null module");
        };
        if out.is_null() {
            return fail(DsStatus::NullArgument, "null output");
        }
        let s = compile(m).stats(m);
        let stats = DsStats {
            static_objects: s.static_objects as u64,
            free_sites: s.free_sites as u64,
            heap_pointers: s.heap_pointers as u64,
            global_pointers: s.global_pointers as u64,
            stack_pointers: s.stack_pointers as u64,
        };
        // SAFETY: checked non-null.
        unsafe { *out = stats };
        DsStatus::Ok
    })
}

/// Default options: protected, stack protection on, asynchronous sweep,
/// one thread.
#[no_mangle]
pub extern "C" fn ds_run_options_default() -> DsRunOptions {
    DsRunOptions {
        protect: true,
        stack_protection: true,
        sync_sweep: false,
        threads: 1,
        step_limit: 0,
    }
}

/// Execute the module. Traps and faults are reported in the summary, not
/// as a failing status.
///
/// # Safety
/// `module` must be a live handle, `options` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_run(module: *const DsModule, options: *const DsRunOptions, out: *mut DsRunSummary) -> DsStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantee.
        let Some(m) = (unsafe { module_ref(module) }) else {
            return fail(DsStatus::NullArgument, "null module");
        };
        // SAFETY: the caller guarantees a readable struct or null.
        let Some(o) = (unsafe { options.as_ref() }) else {
            return fail(DsStatus::NullArgument, "null options");
        };
        if out.is_null() {
            return fail(DsStatus::NullArgument, "null output");
        }
        let max = danglesweep::runtime::memory::MAX_THREADS;
        if o.threads == 0 || o.threads as usize > max {
            return fail(DsStatus::Config, format!("threads must be between 1 and {max}"));
        }
        let base = if o.protect {
            RuntimeConfig {
                stack_protection: o.stack_protection,
                sync_sweep: o.sync_sweep,
                ..Default::default()
            }
        } else {
            RuntimeConfig::unprotected()
        };
        let cfg = RuntimeConfig {
            threads: o.threads as usize,
            step_limit: if o.step_limit == 0 { base.step_limit } else { o.step_limit },
            ..base
        };
        let r = match run(m, &compile(m).table, cfg) {
            Ok(r) => r,
            Err(e) => return fail(DsStatus::Metadata, e.to_string()),
        };
        let summary = DsRunSummary {
            steps: r.steps,
            allocs: r.allocs,
            frees: r.frees,
            traps: r.traps.len() as u64,
            null_traps: r.null_traps() as u64,
            faults: r.faults.len() as u64,
            stale_reads: r.stale_reads,
            stale_writes: r.stale_writes,
            nullified: r.nullified(),
        };
        // SAFETY: checked non-null.
        unsafe { *out = summary };
        DsStatus::Ok
    })
}

/// # Safety
/// `module` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ds_check_uaf(module: *const DsModule, stack_protection: bool, out: *mut DsVerdict) -> DsStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantee.
        let Some(m) = (unsafe { module_ref(module) }) else {
            return fail(DsStatus::NullArgument, "null module");
        };
        if out.is_null() {
            return fail(DsStatus::NullArgument, "null output");
        }
        let c = compile(m);
        let v = match check_uaf(m, &c, stack_protection) {
            Ok(r) => r.verdict,
            Err(e) => return fail(DsStatus::Metadata, e.to_string()),
        };
        // SAFETY: checked non-null.
        unsafe {
            *out = match v {
                Verdict::Prevented => DsVerdict::Prevented,
                Verdict::NotPrevented => DsVerdict::NotPrevented,
                Verdict::NotApplicable => DsVerdict::NotApplicable,
            }
        };
        DsStatus::Ok
    })
}
