//! C interface to layerscope.
//!
//! Two opaque handle types are exposed: `LsGraph` (an architecture, for
//! receptive-field and border queries) and `LsCov` (a streaming covariance
//! accumulator for saturation). Every fallible call returns an `LsStatus`;
//! on failure, `ls_last_error` describes the most recent error on the calling
//! thread. Strings returned by the library are freed with `ls_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use layerscope::arch::{generate_builtin, parse_arch, ArchGraph, BuiltinOptions, LayerKind};
use layerscope::rf::{border_layer, compute_rf, RfResult};
use layerscope::saturation::{saturation_of, CovAccumulator};

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    NotFound = 5,
    Panic = 6,
}

/// An architecture graph with its receptive fields.
pub struct LsGraph {
    graph: ArchGraph,
    rf: RfResult,
}

/// Streaming first/second moment accumulator for one layer.
pub struct LsCov {
    acc: CovAccumulator,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: LsStatus, msg: impl Into<String>) -> LsStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> LsStatus) -> LsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == LsStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => fail(LsStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, LsStatus> {
    if p.is_null() {
        return Err(fail(LsStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LsStatus::InvalidUtf8, "string argument is not valid UTF-8"))
}

fn into_handle(graph: ArchGraph, out: *mut *mut LsGraph) -> LsStatus {
    match compute_rf(&graph) {
        Ok(rf) => {
            // SAFETY: callers check `out` for null before building the graph.
            unsafe { *out = Box::into_raw(Box::new(LsGraph { graph, rf })) };
            LsStatus::Ok
        }
        Err(e) => fail(LsStatus::InvalidArgument, e.to_string()),
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ls_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses an architecture description.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_parse(text: *const c_char, out: *mut *mut LsGraph) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return fail(LsStatus::NullPointer, "null output handle");
        }
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_arch(text) {
            Ok(g) => into_handle(g, out),
            Err(e) => fail(LsStatus::ParseError, e.to_string()),
        }
    })
}

/// Builds a catalog architecture for 3-channel input and 10 classes.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_builtin(name: *const c_char, out: *mut *mut LsGraph) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return fail(LsStatus::NullPointer, "null output handle");
        }
        let name = match read_str(name) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match generate_builtin(name, &BuiltinOptions::default()) {
            Ok(g) => into_handle(g, out),
            Err(e) => fail(LsStatus::NotFound, e.to_string()),
        }
    })
}

/// # Safety
/// `g` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_free(g: *mut LsGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Number of nodes, or 0 for a NULL handle.
///
/// # Safety
/// `g` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_num_nodes(g: *const LsGraph) -> usize {
    g.as_ref().map_or(0, |g| g.graph.len())
}

/// Number of conv layers, or 0 for a NULL handle.
///
/// # Safety
/// `g` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_num_convs(g: *const LsGraph) -> usize {
    g.as_ref().map_or(0, |g| g.graph.conv_nodes().len())
}

/// Receptive field and jump of the node called `name`.
///
/// # Safety
/// `g` must be a live handle, `name` NUL-terminated, and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_rf(
    g: *const LsGraph,
    name: *const c_char,
    out_r: *mut usize,
    out_jump: *mut usize,
) -> LsStatus {
    guard(|| {
        let Some(g) = g.as_ref() else {
            return fail(LsStatus::NullPointer, "null graph handle");
        };
        if out_r.is_null() || out_jump.is_null() {
            return fail(LsStatus::NullPointer, "null output pointer");
        }
        let name = match read_str(name) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match g.rf.by_name(name) {
            Some(e) => {
                *out_r = e.r;
                *out_jump = e.jump;
                LsStatus::Ok
            }
            None => fail(LsStatus::NotFound, format!("no node named `{name}`")),
        }
    })
}

/// Receptive field of the last conv layer.
///
/// # Safety
/// `g` must be a live handle and `out_r` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_final_rf(g: *const LsGraph, out_r: *mut usize) -> LsStatus {
    guard(|| {
        let Some(g) = g.as_ref() else {
            return fail(LsStatus::NullPointer, "null graph handle");
        };
        if out_r.is_null() {
            return fail(LsStatus::NullPointer, "null output pointer");
        }
        let last = g
            .graph
            .nodes()
            .iter()
            .enumerate()
            .rev()
            .find(|(_, n)| n.kind == LayerKind::Conv);
        match last {
            Some((id, _)) => {
                *out_r = g.rf.r(id);
                LsStatus::Ok
            }
            None => fail(LsStatus::NotFound, "graph has no conv layer"),
        }
    })
}

/// Name of the border layer for a square input of side `input_size`. Writes
/// NULL to `out_name` when no layer crosses the border. A non-NULL result is
/// freed with `ls_string_free`.
///
/// # Safety
/// `g` must be a live handle and `out_name` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_graph_border(g: *const LsGraph, input_size: usize, out_name: *mut *mut c_char) -> LsStatus {
    guard(|| {
        let Some(g) = g.as_ref() else {
            return fail(LsStatus::NullPointer, "null graph handle");
        };
        if out_name.is_null() {
            return fail(LsStatus::NullPointer, "null output pointer");
        }
        if input_size == 0 {
            return fail(LsStatus::InvalidArgument, "input size must be positive");
        }
        let report = border_layer(&g.graph, &g.rf, input_size);
        *out_name = match report.border_node {
            Some(n) => CString::new(n).map_or(ptr::null_mut(), CString::into_raw),
            None => ptr::null_mut(),
        };
        LsStatus::Ok
    })
}

/// New accumulator over `dim` features, or NULL when `dim` is 0.
#[no_mangle]
pub extern "C" fn ls_cov_new(dim: usize) -> *mut LsCov {
    if dim == 0 {
        set_error("dimension must be positive");
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(LsCov {
        acc: CovAccumulator::new(dim),
    }))
}

/// # Safety
/// `c` must be NULL or a handle from `ls_cov_new`/`ls_cov_merge`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_cov_free(c: *mut LsCov) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Number of samples seen so far (conv positions count individually).
///
/// # Safety
/// `c` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_cov_count(c: *const LsCov) -> u64 {
    c.as_ref().map_or(0, |c| c.acc.count())
}

/// Adds a row-major block shaped `N×C` (`ndim` 2) or `N×C×H×W` (`ndim` 4).
///
/// # Safety
/// `c` must be a live handle, `shape` must hold `ndim` values and `data` the
/// product of those values.
#[no_mangle]
pub unsafe extern "C" fn ls_cov_accumulate(c: *mut LsCov, data: *const f32, shape: *const usize, ndim: usize) -> LsStatus {
    guard(|| {
        let Some(c) = c.as_mut() else {
            return fail(LsStatus::NullPointer, "null accumulator handle");
        };
        if shape.is_null() || data.is_null() {
            return fail(LsStatus::NullPointer, "null data or shape");
        }
        if ndim != 2 && ndim != 4 {
            return fail(LsStatus::InvalidArgument, format!("ndim must be 2 or 4, got {ndim}"));
        }
        let shape = std::slice::from_raw_parts(shape, ndim);
        let Some(len) = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)) else {
            return fail(LsStatus::InvalidArgument, "shape overflows");
        };
        let block = std::slice::from_raw_parts(data, len);
        match c.acc.accumulate(block, shape) {
            Ok(()) => LsStatus::Ok,
            Err(e) => fail(LsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Combines two accumulators into a new handle; the inputs are left intact.
///
/// # Safety
/// `a` and `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_cov_merge(a: *const LsCov, b: *const LsCov, out: *mut *mut LsCov) -> LsStatus {
    guard(|| {
        let (Some(a), Some(b)) = (a.as_ref(), b.as_ref()) else {
            return fail(LsStatus::NullPointer, "null accumulator handle");
        };
        if out.is_null() {
            return fail(LsStatus::NullPointer, "null output handle");
        }
        match a.acc.merge(&b.acc) {
            Ok(acc) => {
                *out = Box::into_raw(Box::new(LsCov { acc }));
                LsStatus::Ok
            }
            Err(e) => fail(LsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Saturation (`k / dim`) at explained-variance fraction `delta`, plus `k`.
///
/// # Safety
/// `c` must be a live handle and both outputs writable.
#[no_mangle]
pub unsafe extern "C" fn ls_cov_saturation(c: *const LsCov, delta: f64, out_value: *mut f64, out_k: *mut usize) -> LsStatus {
    guard(|| {
        let Some(c) = c.as_ref() else {
            return fail(LsStatus::NullPointer, "null accumulator handle");
        };
        if out_value.is_null() || out_k.is_null() {
            return fail(LsStatus::NullPointer, "null output pointer");
        }
        match saturation_of(&c.acc, delta) {
            Ok(s) => {
                *out_value = s.value;
                *out_k = s.k;
                LsStatus::Ok
            }
            Err(e) => fail(LsStatus::InvalidArgument, e.to_string()),
        }
    })
}
