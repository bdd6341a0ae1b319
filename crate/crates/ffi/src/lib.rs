//! C ABI over the qdb engine.
//!
//! Handles are opaque pointers. Every fallible call returns a `QdbStatus`;
//! on failure the message is available from `qdb_last_error` on the same
//! thread until the next failing call. Panics never cross the boundary.
//! Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{CStr, CString, c_char};
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::ptr;
use std::time::Duration;

use qdb::{Durability, Engine, EngineConfig, Error, ErrorCode, IsolationMode, Message, Ordering, Txn};

/// Result of every fallible call. Nonzero values match the broker's wire
/// error codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QdbStatus {
    Ok = 0,
    NotFound = 1,
    Exists = 2,
    Unavailable = 3,
    Timeout = 4,
    Usage = 5,
    Internal = 6,
}

impl From<ErrorCode> for QdbStatus {
    fn from(c: ErrorCode) -> Self {
        match c {
            ErrorCode::NotFound => QdbStatus::NotFound,
            ErrorCode::Exists => QdbStatus::Exists,
            ErrorCode::Unavailable => QdbStatus::Unavailable,
            ErrorCode::Timeout => QdbStatus::Timeout,
            ErrorCode::Usage => QdbStatus::Usage,
            ErrorCode::Internal => QdbStatus::Internal,
        }
    }
}

/// An open engine.
pub struct QdbEngine(Engine);

/// An active transaction. Commit and abort consume it.
pub struct QdbTxn(Txn);

/// A dequeued message.
pub struct QdbMessage(Message);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', "?")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: QdbStatus, msg: impl Into<String>) -> QdbStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> QdbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QdbStatus::Ok,
        Ok(Err(e)) => fail(e.code().into(), e.to_string()),
        Err(_) => fail(QdbStatus::Internal, "panic inside qdb"),
    }
}

fn usage(msg: &str) -> Error {
    Error::Usage(msg.to_string())
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Error> {
    if s.is_null() {
        return Err(usage(&format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(s) }.to_str().map_err(|_| usage(&format!("{what} is not UTF-8")))
}

/// # Safety
/// `data` must be null with `len` 0, or valid for `len` bytes.
unsafe fn bytes_arg<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Error> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(usage("payload is null"));
    }
    Ok(unsafe { std::slice::from_raw_parts(data, len) })
}

fn isolation(v: u8) -> Result<IsolationMode, Error> {
    match v {
        0 => Ok(IsolationMode::ReadPastDequeue),
        1 => Ok(IsolationMode::Serializable),
        _ => Err(usage("isolation must be 0 (read past) or 1 (serializable)")),
    }
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on this thread.
#[unsafe(no_mangle)]
pub extern "C" fn qdb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opens (or creates) an engine in `dir`, or an in-memory engine when `dir`
/// is null.
///
/// # Safety
/// `dir` must be null or a valid string; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_open(dir: *const c_char, out: *mut *mut QdbEngine) -> QdbStatus {
    if out.is_null() {
        return fail(QdbStatus::Usage, "out is null");
    }
    guard(|| {
        let engine = if dir.is_null() {
            Engine::open_memory(EngineConfig::default())?
        } else {
            Engine::open_dir(unsafe { str_arg(dir, "dir") }?, EngineConfig::default())?
        };
        unsafe { *out = Box::into_raw(Box::new(QdbEngine(engine))) };
        Ok(())
    })
}

/// Checkpoints, stops pools and frees the handle. Null is ignored.
///
/// # Safety
/// `engine` must come from `qdb_open` and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_close(engine: *mut QdbEngine) -> QdbStatus {
    if engine.is_null() {
        return QdbStatus::Ok;
    }
    let engine = unsafe { Box::from_raw(engine) };
    guard(move || engine.0.shutdown())
}

/// # Safety
/// `engine` must be a live handle and `name` a valid string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_create_queue(
    engine: *const QdbEngine,
    name: *const c_char,
    durable: bool,
    priority_ordering: bool,
) -> QdbStatus {
    guard(|| {
        let e = unsafe { engine.as_ref() }.ok_or_else(|| usage("engine is null"))?;
        let name = unsafe { str_arg(name, "name") }?;
        let d = if durable { Durability::Durable } else { Durability::Volatile };
        let o = if priority_ordering { Ordering::Priority } else { Ordering::Fifo };
        e.0.create_queue(name, d, o).map(|_| ())
    })
}

/// # Safety
/// `engine` must be a live handle and `name` a valid string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_destroy_queue(engine: *const QdbEngine, name: *const c_char) -> QdbStatus {
    guard(|| {
        let e = unsafe { engine.as_ref() }.ok_or_else(|| usage("engine is null"))?;
        e.0.destroy_queue(unsafe { str_arg(name, "name") }?)
    })
}

/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_begin(engine: *const QdbEngine, out: *mut *mut QdbTxn) -> QdbStatus {
    guard(|| {
        let e = unsafe { engine.as_ref() }.ok_or_else(|| usage("engine is null"))?;
        if out.is_null() {
            return Err(usage("out is null"));
        }
        let txn = e.0.begin()?;
        unsafe { *out = Box::into_raw(Box::new(QdbTxn(txn))) };
        Ok(())
    })
}

/// Commits and frees the transaction, whatever the outcome.
///
/// # Safety
/// `txn` must come from `qdb_begin` and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_commit(txn: *mut QdbTxn) -> QdbStatus {
    if txn.is_null() {
        return fail(QdbStatus::Usage, "txn is null");
    }
    let mut txn = unsafe { Box::from_raw(txn) };
    guard(move || txn.0.commit())
}

/// Aborts and frees the transaction.
///
/// # Safety
/// `txn` must come from `qdb_begin` and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_abort(txn: *mut QdbTxn) -> QdbStatus {
    if txn.is_null() {
        return fail(QdbStatus::Usage, "txn is null");
    }
    let mut txn = unsafe { Box::from_raw(txn) };
    guard(move || txn.0.abort())
}

/// Enqueues inside `txn`. `out_id` may be null.
///
/// # Safety
/// `txn` must be live, `queue` a valid string, `data` valid for `len`
/// bytes.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_txn_enqueue(
    txn: *mut QdbTxn,
    queue: *const c_char,
    priority: i64,
    data: *const u8,
    len: usize,
    out_id: *mut u64,
) -> QdbStatus {
    guard(|| {
        let t = unsafe { txn.as_mut() }.ok_or_else(|| usage("txn is null"))?;
        let id = t.0.enqueue(unsafe { str_arg(queue, "queue") }?, priority, unsafe { bytes_arg(data, len) }?)?;
        if !out_id.is_null() {
            unsafe { *out_id = id.0 };
        }
        Ok(())
    })
}

/// Dequeues inside `txn`. `*out` is set to null when nothing became
/// available within `wait_ms`. `isolation`: 0 read past, 1 serializable.
///
/// # Safety
/// `txn` must be live, `queue` a valid string, `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_txn_dequeue(
    txn: *mut QdbTxn,
    queue: *const c_char,
    isolation_mode: u8,
    wait_ms: u32,
    out: *mut *mut QdbMessage,
) -> QdbStatus {
    guard(|| {
        let t = unsafe { txn.as_mut() }.ok_or_else(|| usage("txn is null"))?;
        if out.is_null() {
            return Err(usage("out is null"));
        }
        let m = t.0.dequeue(
            unsafe { str_arg(queue, "queue") }?,
            isolation(isolation_mode)?,
            Duration::from_millis(wait_ms.into()),
        )?;
        unsafe { *out = m.map_or(ptr::null_mut(), |m| Box::into_raw(Box::new(QdbMessage(m)))) };
        Ok(())
    })
}

/// Enqueue in a transaction of its own.
///
/// # Safety
/// As `qdb_txn_enqueue`, with a live `engine`.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_enqueue(
    engine: *const QdbEngine,
    queue: *const c_char,
    priority: i64,
    data: *const u8,
    len: usize,
    out_id: *mut u64,
) -> QdbStatus {
    guard(|| {
        let e = unsafe { engine.as_ref() }.ok_or_else(|| usage("engine is null"))?;
        let id = e.0.enqueue(unsafe { str_arg(queue, "queue") }?, priority, unsafe { bytes_arg(data, len) }?)?;
        if !out_id.is_null() {
            unsafe { *out_id = id.0 };
        }
        Ok(())
    })
}

/// Dequeue in a transaction of its own.
///
/// # Safety
/// As `qdb_txn_dequeue`, with a live `engine`.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_dequeue(
    engine: *const QdbEngine,
    queue: *const c_char,
    isolation_mode: u8,
    wait_ms: u32,
    out: *mut *mut QdbMessage,
) -> QdbStatus {
    guard(|| {
        let e = unsafe { engine.as_ref() }.ok_or_else(|| usage("engine is null"))?;
        if out.is_null() {
            return Err(usage("out is null"));
        }
        let m = e.0.dequeue(
            unsafe { str_arg(queue, "queue") }?,
            isolation(isolation_mode)?,
            Duration::from_millis(wait_ms.into()),
        )?;
        unsafe { *out = m.map_or(ptr::null_mut(), |m| Box::into_raw(Box::new(QdbMessage(m)))) };
        Ok(())
    })
}

/// # Safety
/// `msg` must be a live message handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_message_id(msg: *const QdbMessage) -> u64 {
    unsafe { msg.as_ref() }.map_or(0, |m| m.0.id.0)
}

/// # Safety
/// `msg` must be a live message handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_message_priority(msg: *const QdbMessage) -> i64 {
    unsafe { msg.as_ref() }.map_or(0, |m| m.0.priority)
}

/// Payload bytes, valid until the message is freed.
///
/// # Safety
/// `msg` must be a live message handle; `len` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_message_payload(msg: *const QdbMessage, len: *mut usize) -> *const u8 {
    let Some(m) = (unsafe { msg.as_ref() }) else {
        return ptr::null();
    };
    if !len.is_null() {
        unsafe { *len = m.0.payload.len() };
    }
    m.0.payload.as_ptr()
}

/// # Safety
/// `msg` must come from a dequeue call and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_message_free(msg: *mut QdbMessage) {
    if !msg.is_null() {
        drop(unsafe { Box::from_raw(msg) });
    }
}

/// # Safety
/// `engine` must be live; `out_lsn` may be null.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_checkpoint(engine: *const QdbEngine, out_lsn: *mut u64) -> QdbStatus {
    guard(|| {
        let e = unsafe { engine.as_ref() }.ok_or_else(|| usage("engine is null"))?;
        let lsn = e.0.checkpoint()?;
        if !out_lsn.is_null() {
            unsafe { *out_lsn = lsn.0 };
        }
        Ok(())
    })
}

/// Statistics as JSON: the whole engine when `queue` is null, else one
/// queue. Free the result with `qdb_string_free`.
///
/// # Safety
/// `engine` must be live, `queue` null or a valid string, `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_stats_json(
    engine: *const QdbEngine,
    queue: *const c_char,
    out: *mut *mut c_char,
) -> QdbStatus {
    guard(|| {
        let e = unsafe { engine.as_ref() }.ok_or_else(|| usage("engine is null"))?;
        if out.is_null() {
            return Err(usage("out is null"));
        }
        let json = if queue.is_null() {
            serde_json(&e.0.report())
        } else {
            serde_json(&e.0.stats(unsafe { str_arg(queue, "queue") }?)?)
        };
        let c = CString::new(json).map_err(|_| Error::Corrupt("nul in stats".into()))?;
        unsafe { *out = c.into_raw() };
        Ok(())
    })
}

fn serde_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("stats serialize")
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn qdb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
