use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "prealign.h"

int main(void) {
    double logits[PA_NUM_EXPERTS] = {2.0, 1.0, 0.5, -1.0};
    double probs[PA_NUM_EXPERTS];
    if (pa_route(logits, 1, 0, probs) != PA_STATUS_OK) return 1;
    if (probs[0] != 1.0 || probs[1] != 0.0) return 2;
    if (pa_route(logits, 5, 0, probs) != PA_STATUS_CONFIG) return 3;
    char msg[256];
    if (pa_last_error(msg, sizeof msg) == 0) return 4;
    PaConfig *cfg = pa_config_default();
    char hash[65];
    if (pa_config_hash(cfg, hash, sizeof hash) != 64) return 5;
    pa_config_free(cfg);
    printf("%s\n", pa_version());
    return 0;
}
"#;

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn static_lib() -> PathBuf {
    // tests/<exe> lives in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().join("libprealign_ffi.a")
}

#[test]
fn header_compiles_links_and_runs() {
    let header = header_dir().join("prealign.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["pa_route", "pa_config_load", "pa_align", "pa_train", "pa_checkpoint_evaluate", "PA_STATUS_RUNTIME"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let lib = static_lib();
    assert!(lib.exists(), "{} not built", lib.display());
    let exe = dir.path().join("probe");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(header_dir())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
