use std::path::Path;
use std::process::Command;

/// Builds a small C program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("qdb.h").exists(), "header not generated");
    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().unwrap().parent().unwrap();
    let lib = target_dir.join("libqdb_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("no C compiler or static library; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("t.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "qdb.h"
int main(void) {
    QdbEngine *e = NULL;
    if (qdb_open(NULL, &e) != QDB_STATUS_OK) return 1;
    if (qdb_create_queue(e, "q", true, false) != QDB_STATUS_OK) return 2;
    if (qdb_enqueue(e, "q", 0, (const uint8_t *)"hi", 2, NULL) != QDB_STATUS_OK) return 3;
    QdbMessage *m = NULL;
    if (qdb_dequeue(e, "q", 0, 0, &m) != QDB_STATUS_OK || m == NULL) return 4;
    size_t len = 0;
    const uint8_t *p = qdb_message_payload(m, &len);
    if (len != 2 || memcmp(p, "hi", 2) != 0) return 5;
    qdb_message_free(m);
    if (qdb_enqueue(e, "missing", 0, NULL, 0, NULL) != QDB_STATUS_NOT_FOUND) return 6;
    if (qdb_last_error() == NULL) return 7;
    if (qdb_close(e) != QDB_STATUS_OK) return 8;
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = tmp.path().join("t");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
