use std::process::Command;

use lemb_core::EmbeddingTable;
use serde_json::Value;

fn lemb() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lemb"))
}

fn scenario(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn chaos_prints_a_clean_report() {
    let out = lemb().args(["chaos", "--scenario"]).arg(scenario("steady.json")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["version_mismatch_count"], 0);
    assert_eq!(report["converged"], true);
    assert_eq!(report["requests"], report["completed"]);
}

#[test]
fn config_errors_name_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"requests": 10, "ads": {"fetch_timeout_ms": "soon"}}"#).unwrap();
    let out = lemb().args(["chaos", "--scenario"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/ads/fetch_timeout_ms"), "{stderr}");
}

#[test]
fn quantize_writes_a_loadable_int4_table() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("t.pemb"), dir.path().join("t4.pemb"));
    let data = (0..256 * 64).map(|i| ((i * 37 % 101) as f32 - 50.0) / 25.0).collect();
    EmbeddingTable::from_f32("t", "v1", 256, 64, data).unwrap().save(&src).unwrap();

    let out = lemb().args(["quantize", "--in"]).arg(&src).arg("--out").arg(&dst).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let ratio = report["ratio"].as_f64().unwrap();
    assert!((0.28..=0.32).contains(&ratio), "{report}");

    let q = EmbeddingTable::load(&dst).unwrap();
    assert_eq!((q.num_rows(), q.dim(), q.dtype()), (256, 64, lemb_core::tables::Dtype::Int4q));
}
