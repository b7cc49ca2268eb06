//! C ABI over the i2i lab: read checkpoints and run records through opaque
//! handles, and compute the transfer metrics.
//!
//! Every fallible function returns an `I2iStatus`. On failure a message is
//! kept per thread and can be read with `i2i_last_error`. Strings are copied
//! into caller buffers; `needed` always receives the size including the
//! terminating NUL.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;

use i2i_core::baselines::cosine;
use i2i_core::checkpoint::Checkpoint;
use i2i_core::harness::CLRunRecord;
use i2i_core::metrics;
use i2i_core::rng::sha256_hex;
use i2i_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum I2iStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    DigestMismatch = 5,
    Config = 6,
    Audit = 7,
    /// No value: the metric or field is undefined for this input.
    Unavailable = 8,
    /// The caller's buffer is too small; `needed` holds the required size.
    BufferTooSmall = 9,
    OutOfRange = 10,
    Panic = 11,
    Internal = 12,
}

/// A checkpoint read from disk.
pub struct I2iCheckpoint {
    inner: Checkpoint,
    sha256: String,
}

/// A continual-learning run record.
pub struct I2iRecord {
    inner: CLRunRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> I2iStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) | Error::NonFinite(_) => {
            I2iStatus::InvalidArgument
        }
        Error::Format(_) | Error::Json(_) => I2iStatus::Format,
        Error::Io(_) => I2iStatus::Io,
        Error::DigestMismatch { .. } => I2iStatus::DigestMismatch,
        Error::Config(_) => I2iStatus::Config,
        Error::ForgettingAudit { .. } => I2iStatus::Audit,
        _ => I2iStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (I2iStatus, String)> + UnwindSafe) -> I2iStatus {
    match catch_unwind(f) {
        Ok(Ok(())) => I2iStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            I2iStatus::Panic
        }
    }
}

fn fail(e: Error) -> (I2iStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (I2iStatus, String) {
    (I2iStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, (I2iStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (I2iStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
    Ok(Path::new(s))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), (I2iStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = value;
    Ok(())
}

unsafe fn copy_str(
    s: &str,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> Result<(), (I2iStatus, String)> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return Err((I2iStatus::BufferTooSmall, format!("buffer needs {n} bytes")));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

unsafe fn slice_arg<'a>(
    ptr: *const f64,
    len: usize,
    what: &str,
) -> Result<&'a [f64], (I2iStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn i2i_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread. Valid until the next failing
/// call on the same thread; empty when nothing failed yet.
#[no_mangle]
pub extern "C" fn i2i_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads and verifies a checkpoint. Free the handle with
/// `i2i_checkpoint_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn i2i_checkpoint_read(
    path: *const c_char,
    out: *mut *mut I2iCheckpoint,
) -> I2iStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let p = path_arg(path)?;
        let bytes = std::fs::read(p).map_err(|e| fail(e.into()))?;
        let inner = Checkpoint::from_bytes(&bytes).map_err(fail)?;
        let handle = Box::new(I2iCheckpoint {
            inner,
            sha256: sha256_hex(&bytes),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// # Safety
/// `handle` must come from `i2i_checkpoint_read` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn i2i_checkpoint_free(handle: *mut I2iCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be a live checkpoint handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_checkpoint_block_count(
    handle: *const I2iCheckpoint,
    out: *mut usize,
) -> I2iStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("checkpoint"))?;
        write_out(out, h.inner.blocks.len())
    })
}

/// Number of scalars in blocks whose name starts with `prefix` (all blocks
/// when `prefix` is null or empty).
///
/// # Safety
/// `handle` must be a live checkpoint handle, `prefix` null or
/// NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_checkpoint_param_count(
    handle: *const I2iCheckpoint,
    prefix: *const c_char,
    out: *mut usize,
) -> I2iStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("checkpoint"))?;
        let prefix = if prefix.is_null() {
            ""
        } else {
            CStr::from_ptr(prefix).to_str().map_err(|_| {
                (
                    I2iStatus::InvalidArgument,
                    "prefix is not UTF-8".to_string(),
                )
            })?
        };
        let n = h
            .inner
            .blocks
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum();
        write_out(out, n)
    })
}

/// Hex SHA-256 of the checkpoint file (64 characters).
///
/// # Safety
/// `handle` must be a live checkpoint handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn i2i_checkpoint_sha256(
    handle: *const I2iCheckpoint,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> I2iStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("checkpoint"))?;
        copy_str(&h.sha256, buf, cap, needed)
    })
}

/// Reads and validates a run record. Free with `i2i_record_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn i2i_record_read(
    path: *const c_char,
    out: *mut *mut I2iRecord,
) -> I2iStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let inner = CLRunRecord::read(path_arg(path)?).map_err(fail)?;
        *out = Box::into_raw(Box::new(I2iRecord { inner }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from `i2i_record_read` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn i2i_record_free(handle: *mut I2iRecord) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be a live record handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_record_task_count(
    handle: *const I2iRecord,
    out: *mut usize,
) -> I2iStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("record"))?;
        write_out(out, h.inner.tasks.len())
    })
}

unsafe fn task_at<'a>(
    handle: *const I2iRecord,
    index: usize,
) -> Result<&'a i2i_core::harness::TaskRecord, (I2iStatus, String)> {
    let h = handle.as_ref().ok_or_else(|| null("record"))?;
    h.inner.tasks.get(index).ok_or_else(|| {
        (
            I2iStatus::OutOfRange,
            format!(
                "task index {index} out of range for {} tasks",
                h.inner.tasks.len()
            ),
        )
    })
}

/// Task id at run position `index` (0-based).
///
/// # Safety
/// `handle` must be a live record handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn i2i_record_task_id(
    handle: *const I2iRecord,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> I2iStatus {
    guard(|| copy_str(&task_at(handle, index)?.task_id, buf, cap, needed))
}

/// Final validation exact match (percent) of the task at `index`.
///
/// # Safety
/// `handle` must be a live record handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_record_score(
    handle: *const I2iRecord,
    index: usize,
    out: *mut f64,
) -> I2iStatus {
    guard(|| write_out(out, task_at(handle, index)?.score))
}

/// Overall knowledge transfer of the run; `Unavailable` when the run has no
/// vanilla reference.
///
/// # Safety
/// `handle` must be a live record handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_record_overall_transfer(
    handle: *const I2iRecord,
    out: *mut f64,
) -> I2iStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("record"))?;
        match h.inner.metrics.overall_transfer {
            Some(v) => write_out(out, v),
            None => Err((
                I2iStatus::Unavailable,
                "record has no overall transfer".into(),
            )),
        }
    })
}

/// `100·(s_f − s_a)/s_a`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_knowledge_transfer(s_f: f64, s_a: f64, out: *mut f64) -> I2iStatus {
    guard(|| write_out(out, metrics::knowledge_transfer(s_f, s_a).map_err(fail)?))
}

/// Mean of `len` per-task transfers.
///
/// # Safety
/// `values` must point to `len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_overall_transfer(
    values: *const f64,
    len: usize,
    out: *mut f64,
) -> I2iStatus {
    guard(|| {
        let v = slice_arg(values, len, "values")?;
        write_out(out, metrics::overall_transfer(v).map_err(fail)?)
    })
}

/// `100·(s_f − s_phi)/s_f`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_distillation_decay(s_f: f64, s_phi: f64, out: *mut f64) -> I2iStatus {
    guard(|| write_out(out, metrics::distillation_decay(s_f, s_phi).map_err(fail)?))
}

/// Mean relative gain of the final phase over the distilled start, from
/// paired arrays of `len` scores.
///
/// # Safety
/// `after2` and `after3` must each point to `len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_phase3_gain(
    after2: *const f64,
    after3: *const f64,
    len: usize,
    out: *mut f64,
) -> I2iStatus {
    guard(|| {
        let a = slice_arg(after2, len, "after2")?;
        let b = slice_arg(after3, len, "after3")?;
        let pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
        write_out(out, metrics::phase3_gain(&pairs).map_err(fail)?)
    })
}

/// Cosine similarity of two vectors of `len` doubles.
///
/// # Safety
/// `a` and `b` must each point to `len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn i2i_cosine(
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> I2iStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        write_out(out, cosine(a, b).map_err(fail)?)
    })
}
