//! Compiles and runs a C program against the generated header and the
//! static library, when a C compiler is available.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "igap.h"

int main(void) {
    size_t edges[] = {0, 1, 1, 2};
    double x[] = {1.0, 0.0, -1.0};
    IgapGraph *g = NULL;
    if (igap_graph_new(3, edges, 2, x, 1, NULL, &g) != IGAP_STATUS_OK) return 1;
    IgapBasis *b = NULL;
    if (igap_spectrum(g, 0, IGAP_SOLVER_DENSE, 0, &b) != IGAP_STATUS_OK) return 2;
    double vals[3];
    if (igap_basis_eigenvalues(b, vals, 3) != IGAP_STATUS_OK) return 3;
    if (igap_basis_eigenvalues(b, vals, 2) != IGAP_STATUS_INVALID_ARGUMENT) return 4;
    if (igap_last_error() == NULL) return 5;
    printf("%.12f %.12f %.12f\n", vals[0], vals[1], vals[2]);
    igap_basis_free(b);
    igap_graph_free(g);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps/
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

fn cc() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(String::from)
}

#[test]
fn c_program_links_and_runs() {
    let Some(cc) = cc() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = target_dir().join("libigap_ffi.a");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let syntax = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(syntax.status.success(), "{}", String::from_utf8_lossy(&syntax.stderr));
    if !lib.exists() {
        eprintln!("{} not built; link step skipped", lib.display());
        return;
    }
    let bin = dir.path().join("main");
    let link = Command::new(&cc)
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(link.status.success(), "{}", String::from_utf8_lossy(&link.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let vals: Vec<f64> = String::from_utf8(run.stdout)
        .unwrap()
        .split_whitespace()
        .map(|v| v.parse().unwrap())
        .collect();
    for (v, e) in vals.iter().zip([0.0, 1.0, 3.0]) {
        assert!((v - e).abs() < 1e-9, "{vals:?}");
    }
}
