//! C ABI for docicl.
//!
//! Conventions:
//! * Every fallible call returns a [`DociclStatus`]; on failure the message is
//!   available from [`docicl_last_error`] on the same thread.
//! * Handles are opaque and released with their matching `_free` function.
//! * Strings returned through out-parameters are owned by the caller and must be
//!   released with [`docicl_string_free`].
//! * Panics never cross the boundary; they surface as `DOCICL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use docicl::evaluation::{evaluate, EvalMode};
use docicl::extraction::parse_labeled_segments;
use docicl::ingest::{load_dataset, load_normalized, write_normalized, write_predictions};
use docicl::ordering::{order_document, OrderingParams};
use docicl::perturb::{perturb_document, PerturbSpec};
use docicl::types::{Dataset, Document, LabelSchema};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DociclStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Evaluation = 6,
    Panic = 7,
}

/// Opaque collection of documents.
pub struct DociclDocuments {
    docs: Vec<Document>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DociclStatus, String);

type Outcome<T> = Result<T, Failure>;

fn fail<T>(status: DociclStatus, msg: impl Into<String>) -> Outcome<T> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Outcome<()>) -> DociclStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DociclStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            DociclStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return fail(DociclStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| fail(DociclStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a>(h: *const DociclDocuments, name: &str) -> Outcome<&'a DociclDocuments> {
    h.as_ref().map_or_else(|| fail(DociclStatus::NullArgument, format!("{name} is null")), Ok)
}

unsafe fn out_ptr<'a, T>(out: *mut T, name: &str) -> Outcome<&'a mut T> {
    out.as_mut().map_or_else(|| fail(DociclStatus::NullArgument, format!("{name} is null")), Ok)
}

fn to_c_string(s: String) -> Outcome<*mut c_char> {
    CString::new(s).map(CString::into_raw).or_else(|_| fail(DociclStatus::Parse, "output contains a NUL byte"))
}

fn json<T: serde::Serialize>(v: &T) -> Outcome<*mut c_char> {
    match serde_json::to_string(v) {
        Ok(s) => to_c_string(s),
        Err(e) => fail(DociclStatus::Parse, e.to_string()),
    }
}

fn boxed(docs: Vec<Document>) -> *mut DociclDocuments {
    Box::into_raw(Box::new(DociclDocuments { docs }))
}

fn io(e: impl std::fmt::Display) -> Failure {
    Failure(DociclStatus::Io, e.to_string())
}

/// Message for the last failed call on this thread, or NULL. The pointer stays
/// valid until the next docicl call on the same thread.
#[no_mangle]
pub extern "C" fn docicl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn docicl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn docicl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Release a document handle. NULL is ignored.
///
/// # Safety
/// `h` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_free(h: *mut DociclDocuments) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Load a normalized JSONL file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_load(path: *const c_char, out: *mut *mut DociclDocuments) -> DociclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let docs = load_normalized(Path::new(str_arg(path, "path")?)).map_err(io)?;
        *out = boxed(docs);
        Ok(())
    })
}

/// Load a raw dataset directory. `dataset` is FUNSD, CORD, SROIE or CUSTOM
/// (a normalized file path).
///
/// # Safety
/// `dataset` and `root` must be valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_load_dataset(
    dataset: *const c_char,
    root: *const c_char,
    out: *mut *mut DociclDocuments,
) -> DociclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds: Dataset =
            str_arg(dataset, "dataset")?.parse().map_err(|e| Failure(DociclStatus::InvalidArgument, e))?;
        let docs = load_dataset(ds, Path::new(str_arg(root, "root")?)).map_err(io)?;
        *out = boxed(docs);
        Ok(())
    })
}

/// Build a handle from a JSON array of documents.
///
/// # Safety
/// `json_text` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_from_json(
    json_text: *const c_char,
    out: *mut *mut DociclDocuments,
) -> DociclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let docs: Vec<Document> = serde_json::from_str(str_arg(json_text, "json")?)
            .map_err(|e| Failure(DociclStatus::Parse, e.to_string()))?;
        *out = boxed(docs);
        Ok(())
    })
}

/// Serialize the documents, predictions included, as a JSON array.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_to_json(h: *const DociclDocuments, out: *mut *mut c_char) -> DociclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = json(&handle(h, "documents")?.docs)?;
        Ok(())
    })
}

/// Number of documents; 0 for NULL.
///
/// # Safety
/// `h` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_len(h: *const DociclDocuments) -> usize {
    h.as_ref().map_or(0, |d| d.docs.len())
}

/// Write the documents. With `with_predictions` nonzero the file is a
/// predictions file, otherwise a normalized file.
///
/// # Safety
/// `h` must be a live handle; `path` must be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_write(
    h: *const DociclDocuments,
    path: *const c_char,
    with_predictions: i32,
) -> DociclStatus {
    guard(|| {
        let docs = &handle(h, "documents")?.docs;
        let path = Path::new(str_arg(path, "path")?);
        if with_predictions != 0 {
            write_predictions(docs, path).map_err(io)
        } else {
            write_normalized(docs, path).map_err(io)
        }
    })
}

/// Reorder every document in place with default XY-cut parameters.
///
/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_order(h: *mut DociclDocuments) -> DociclStatus {
    guard(|| {
        let d = out_ptr(h, "documents")?;
        let params = OrderingParams::default();
        d.docs = d.docs.iter().map(|doc| order_document(doc, &params)).collect();
        Ok(())
    })
}

/// Perturbed copy of the documents. The per-word log is returned as JSON in
/// `log_json` when that pointer is non-NULL.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable; `log_json` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn docicl_documents_perturb(
    h: *const DociclDocuments,
    seed: u64,
    p_char_delete: f64,
    p_substitute: f64,
    out: *mut *mut DociclDocuments,
    log_json: *mut *mut c_char,
) -> DociclStatus {
    guard(|| {
        let docs = &handle(h, "documents")?.docs;
        let out = out_ptr(out, "out")?;
        let spec = PerturbSpec { seed, p_char_delete, p_substitute, ..PerturbSpec::default() };
        spec.validate().map_err(|e| Failure(DociclStatus::InvalidArgument, e.to_string()))?;
        let (perturbed, logs): (Vec<_>, Vec<_>) = docs.iter().map(|d| perturb_document(d, &spec)).unzip();
        if let Some(l) = log_json.as_mut() {
            *l = json(&logs)?;
        }
        *out = boxed(perturbed);
        Ok(())
    })
}

/// Score `pred` against `gold` and return the report as JSON. `dataset` may be
/// NULL to use the gold documents' dataset. `mode` is 0 for per-segment
/// scoring and 1 for receipt key fields.
///
/// # Safety
/// Handles must be live; `dataset` must be NULL or a valid C string; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn docicl_evaluate(
    pred: *const DociclDocuments,
    gold: *const DociclDocuments,
    dataset: *const c_char,
    mode: i32,
    out: *mut *mut c_char,
) -> DociclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (pred, gold) = (&handle(pred, "pred")?.docs, &handle(gold, "gold")?.docs);
        let ds = if dataset.is_null() {
            gold.first().map_or(Dataset::Custom, |d| d.dataset)
        } else {
            str_arg(dataset, "dataset")?.parse().map_err(|e| Failure(DociclStatus::InvalidArgument, e))?
        };
        if ds == Dataset::Custom {
            return fail(DociclStatus::InvalidArgument, "custom datasets need a schema; pass FUNSD, CORD or SROIE");
        }
        let mode = match mode {
            0 => EvalMode::Segment,
            1 => EvalMode::SroieField,
            m => return fail(DociclStatus::InvalidArgument, format!("unknown mode {m}")),
        };
        let report = evaluate(pred, gold, &LabelSchema::for_dataset(ds), mode)
            .map_err(|e| Failure(DociclStatus::Evaluation, e.to_string()))?;
        *out = json(&report)?;
        Ok(())
    })
}

/// Parse model output in the labeled record format; returns
/// `{"entities": [...], "queries": [...], "diagnostics": [...]}`.
///
/// # Safety
/// `text` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn docicl_parse_labeled(text: *const c_char, out: *mut *mut c_char) -> DociclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = json(&parse_labeled_segments(str_arg(text, "text")?))?;
        Ok(())
    })
}
