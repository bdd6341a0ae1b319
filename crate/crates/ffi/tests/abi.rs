use std::ffi::{CStr, CString};
use std::ptr;

use qdb_ffi::*;

fn last_error() -> String {
    let p = qdb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn open_memory() -> *mut QdbEngine {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { qdb_open(ptr::null(), &mut e) }, QdbStatus::Ok);
    e
}

#[test]
fn enqueue_dequeue_round_trip() {
    let e = open_memory();
    let q = CString::new("q").unwrap();
    unsafe {
        assert_eq!(qdb_create_queue(e, q.as_ptr(), true, true), QdbStatus::Ok);
        let mut id = 0;
        assert_eq!(qdb_enqueue(e, q.as_ptr(), 1, b"low".as_ptr(), 3, &mut id), QdbStatus::Ok);
        assert_eq!(qdb_enqueue(e, q.as_ptr(), 9, b"high".as_ptr(), 4, ptr::null_mut()), QdbStatus::Ok);

        let mut t = ptr::null_mut();
        assert_eq!(qdb_begin(e, &mut t), QdbStatus::Ok);
        let mut m = ptr::null_mut();
        assert_eq!(qdb_txn_dequeue(t, q.as_ptr(), 0, 0, &mut m), QdbStatus::Ok);
        assert!(!m.is_null());
        let mut len = 0;
        let p = qdb_message_payload(m, &mut len);
        assert_eq!(std::slice::from_raw_parts(p, len), b"high");
        assert_eq!(qdb_message_priority(m), 9);
        qdb_message_free(m);
        assert_eq!(qdb_abort(t), QdbStatus::Ok);

        let mut m = ptr::null_mut();
        assert_eq!(qdb_dequeue(e, q.as_ptr(), 1, 0, &mut m), QdbStatus::Ok);
        assert_eq!(qdb_message_priority(m), 9, "aborted dequeue is redelivered");
        qdb_message_free(m);
        assert_eq!(qdb_dequeue(e, q.as_ptr(), 1, 0, &mut m), QdbStatus::Ok);
        assert_eq!(qdb_message_id(m), id);
        qdb_message_free(m);
        assert_eq!(qdb_dequeue(e, q.as_ptr(), 1, 0, &mut m), QdbStatus::Ok);
        assert!(m.is_null());
        assert_eq!(qdb_close(e), QdbStatus::Ok);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    let e = open_memory();
    let q = CString::new("nope").unwrap();
    unsafe {
        assert_eq!(qdb_enqueue(e, q.as_ptr(), 0, ptr::null(), 0, ptr::null_mut()), QdbStatus::NotFound);
        assert!(last_error().contains("nope"));
        assert_eq!(qdb_create_queue(e, q.as_ptr(), true, false), QdbStatus::Ok);
        assert_eq!(qdb_create_queue(e, q.as_ptr(), true, false), QdbStatus::Exists);
        assert_eq!(qdb_create_queue(e, ptr::null(), true, false), QdbStatus::Usage);
        let mut m = ptr::null_mut();
        assert_eq!(qdb_dequeue(e, q.as_ptr(), 7, 0, &mut m), QdbStatus::Usage);
        assert_eq!(qdb_enqueue(e, q.as_ptr(), 0, ptr::null(), 5, ptr::null_mut()), QdbStatus::Usage);
        assert_eq!(qdb_commit(ptr::null_mut()), QdbStatus::Usage);
        assert_eq!(qdb_close(e), QdbStatus::Ok);
        assert_eq!(qdb_close(ptr::null_mut()), QdbStatus::Ok);
    }
}

#[test]
fn stats_and_checkpoint_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    let q = CString::new("q").unwrap();
    unsafe {
        let mut e = ptr::null_mut();
        assert_eq!(qdb_open(d.as_ptr(), &mut e), QdbStatus::Ok);
        let mut second = ptr::null_mut();
        assert_eq!(qdb_open(d.as_ptr(), &mut second), QdbStatus::Unavailable, "directory is locked");
        assert_eq!(qdb_create_queue(e, q.as_ptr(), true, false), QdbStatus::Ok);
        let mut t = ptr::null_mut();
        assert_eq!(qdb_begin(e, &mut t), QdbStatus::Ok);
        assert_eq!(qdb_txn_enqueue(t, q.as_ptr(), 0, b"x".as_ptr(), 1, ptr::null_mut()), QdbStatus::Ok);
        assert_eq!(qdb_commit(t), QdbStatus::Ok);
        let mut lsn = 0;
        assert_eq!(qdb_checkpoint(e, &mut lsn), QdbStatus::Ok);
        assert!(lsn > 0);
        let mut s = ptr::null_mut();
        assert_eq!(qdb_stats_json(e, q.as_ptr(), &mut s), QdbStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert_eq!(v["depth_visible"], 1);
        qdb_string_free(s);
        assert_eq!(qdb_close(e), QdbStatus::Ok);

        assert_eq!(qdb_open(d.as_ptr(), &mut e), QdbStatus::Ok);
        assert_eq!(qdb_stats_json(e, ptr::null(), &mut s), QdbStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert_eq!(v["queues"][0]["depth_visible"], 1);
        qdb_string_free(s);
        assert_eq!(qdb_close(e), QdbStatus::Ok);
    }
}
