//! C interface to seqtwin.
//!
//! A bundle is loaded once into an opaque [`SeqtwinBundle`] handle and can then
//! serve simulations from any number of threads. Strings returned by the library
//! are owned by the caller and released with [`seqtwin_string_free`].
//!
//! Every entry point returns a [`SeqtwinStatus`]. On failure a JSON error body
//! (`{"error": kind, ...}`, the same shape as the HTTP service) is available
//! through [`seqtwin_last_error`] on the failing thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde_json::{json, Value};

use seqtwin::app::{self, ModelBundle, SimulationRequest};
use seqtwin::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqtwinStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    /// Bad magic, digest mismatch or malformed content.
    BundleCorrupt = 4,
    BundleVersion = 5,
    /// Request is not valid JSON or does not match the request schema.
    BadRequest = 6,
    /// Patient features failed validation.
    Validation = 7,
    InvalidRequest = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque handle to a loaded bundle.
pub struct SeqtwinBundle {
    bundle: ModelBundle,
    digest: String,
    seeds: AtomicU64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(body: Value) {
    let s = CString::new(body.to_string()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: SeqtwinStatus, kind: &str, message: impl std::fmt::Display) -> SeqtwinStatus {
    set_error(json!({ "error": kind, "message": message.to_string() }));
    status
}

fn status_of(e: &Error) -> SeqtwinStatus {
    match e {
        Error::Io { .. } => SeqtwinStatus::Io,
        Error::BundleDigest { .. } | Error::BundleFormat(_) | Error::Json(_) => {
            SeqtwinStatus::BundleCorrupt
        }
        Error::BundleVersion { .. } => SeqtwinStatus::BundleVersion,
        Error::Validation(_) => SeqtwinStatus::Validation,
        Error::Config(_) | Error::Usage(_) | Error::Domain(_) => SeqtwinStatus::InvalidRequest,
        _ => SeqtwinStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> SeqtwinStatus) -> SeqtwinStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SeqtwinStatus::Panic, "panic", "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, SeqtwinStatus> {
    if p.is_null() {
        return Err(fail(SeqtwinStatus::NullPointer, "null_pointer", "null argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(SeqtwinStatus::InvalidUtf8, "invalid_utf8", e))
}

fn into_c(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Load a bundle file. On success `*out` receives a handle to release with
/// [`seqtwin_bundle_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqtwin_bundle_load(
    path: *const c_char,
    out: *mut *mut SeqtwinBundle,
) -> SeqtwinStatus {
    guard(|| {
        if out.is_null() {
            return fail(SeqtwinStatus::NullPointer, "null_pointer", "null output pointer");
        }
        *out = ptr::null_mut();
        let path = match read_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match app::load_bundle(path) {
            Ok((bundle, digest)) => {
                *out = Box::into_raw(Box::new(SeqtwinBundle {
                    bundle,
                    digest,
                    seeds: AtomicU64::new(1),
                }));
                SeqtwinStatus::Ok
            }
            Err(e) => fail(status_of(&e), "bundle", e),
        }
    })
}

/// # Safety
/// `handle` must come from [`seqtwin_bundle_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn seqtwin_bundle_free(handle: *mut SeqtwinBundle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Hex SHA-256 digest of the loaded bundle. Null if `handle` is null.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seqtwin_bundle_digest(handle: *const SeqtwinBundle) -> *mut c_char {
    match handle.as_ref() {
        Some(h) => into_c(h.digest.clone()),
        None => ptr::null_mut(),
    }
}

/// Run one simulation. `request_json` is a simulation request as accepted by
/// `POST /api/simulate`; on success `*out_json` receives the response.
///
/// # Safety
/// `handle` must be a live handle, `request_json` NUL-terminated and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqtwin_simulate_json(
    handle: *const SeqtwinBundle,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> SeqtwinStatus {
    guard(|| {
        if out_json.is_null() {
            return fail(SeqtwinStatus::NullPointer, "null_pointer", "null output pointer");
        }
        *out_json = ptr::null_mut();
        let Some(h) = handle.as_ref() else {
            return fail(SeqtwinStatus::NullPointer, "null_pointer", "null bundle handle");
        };
        let text = match read_str(request_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let req: SimulationRequest = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return fail(SeqtwinStatus::BadRequest, "bad_request", e),
        };
        let fallback = h.seeds.fetch_add(1, Ordering::Relaxed);
        let resp = app::handle_simulate(&req, &h.bundle, fallback)
            .and_then(|r| serde_json::to_string(&r).map_err(Error::from));
        match resp {
            Ok(s) => {
                *out_json = into_c(s);
                SeqtwinStatus::Ok
            }
            Err(e) => {
                set_error(app::error_body(&e).1);
                status_of(&e)
            }
        }
    })
}

/// Input-form metadata, identical to `GET /api/schema`.
#[no_mangle]
pub extern "C" fn seqtwin_schema_json() -> *mut c_char {
    catch_unwind(|| into_c(app::schema_json().to_string())).unwrap_or(ptr::null_mut())
}

/// JSON error body from the last failed call on this thread, or null.
/// The pointer stays valid until the next library call on the same thread
/// and must not be freed.
#[no_mangle]
pub extern "C" fn seqtwin_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by a `seqtwin_*` function that
/// transfers ownership, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn seqtwin_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn seqtwin_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
