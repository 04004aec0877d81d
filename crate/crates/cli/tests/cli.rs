use std::path::Path;
use std::process::{Command, Output};

fn thermo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermo")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = thermo(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(thermo(&[]).status.code(), Some(1));
    let unknown = thermo(&["gen", "--n", "1", "--out", "x", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(thermo(&["--help"]).status.code(), Some(0));
    let missing = thermo(&["export", "--sample", "/nonexistent/x.tesf", "--field", "T", "--png", "/tmp/x.png"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn untrained_model_smoke_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let model = dir.path().join("m.mtaw");
    let report = dir.path().join("r.json");
    ok(&["gen", "--n", "2", "--grid", "32", "--seed", "1", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--epochs", "0", "--levels", "2", "--base", "4", "--out", s(&model)]);
    let table = ok(&["eval", "--model", s(&model), "--data", s(&data), "--report", s(&report)]);
    assert!(table.contains("MRE"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let fields = json["models"][0]["fields"].as_array().unwrap();
    assert_eq!(fields.len(), 5);
    assert!(fields.iter().all(|f| f["mre"].as_f64().unwrap() > 0.0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["norm_stats"].as_array().unwrap().len(), 6);
}

#[test]
fn export_is_deterministic_and_csv_has_grid_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen", "--n", "1", "--grid", "24", "--seed", "4", "--holes", "none", "--out", s(&data)]);
    let sample = data.join("sample_00000.tesf");
    let (a, b, csv) = (dir.path().join("a.png"), dir.path().join("b.png"), dir.path().join("f.csv"));
    ok(&["export", "--sample", s(&sample), "--field", "sxx", "--png", s(&a), "--csv", s(&csv)]);
    ok(&["export", "--sample", s(&sample), "--field", "sxx", "--png", s(&b)]);
    let png = std::fs::read(&a).unwrap();
    assert_eq!(png, std::fs::read(&b).unwrap());
    assert_eq!(&png[1..4], b"PNG");
    assert!(png.windows(4).any(|w| w == b"tEXt"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 24);
    for row in rows {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 24);
    }
}

#[test]
fn solve_from_csv_matches_generated_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen", "--n", "1", "--grid", "20", "--seed", "8", "--out", s(&data)]);
    let sample = data.join("sample_00000.tesf");
    let (png, csv, out) = (dir.path().join("t.png"), dir.path().join("t.csv"), dir.path().join("o.tesf"));
    ok(&["export", "--sample", s(&sample), "--field", "T", "--png", s(&png), "--csv", s(&csv)]);
    ok(&["solve", "--temp", s(&csv), "--out", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&sample).unwrap());
}

#[test]
fn custom_holes_and_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen", "--n", "1", "--grid", "32", "--holes", "0.1,0.1,0.02", "--out", s(&data)]);
    ok(&["audit", "--data", s(&data)]);
    let bad = thermo(&["gen", "--n", "1", "--grid", "32", "--holes", "0.1,0.1", "--out", s(&data)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("cx,cy,r"));
}
