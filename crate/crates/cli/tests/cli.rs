//! End-to-end runs of the `netobs` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const KEY_HEX: &str = "000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f";

fn netobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netobs"))
        .args(args)
        .env("NETOBS_TEST_KEY", KEY_HEX)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = netobs(args);
    assert!(
        out.status.success(),
        "netobs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small generated capture: 8 windows of 4096 packets.
fn generate(dir: &Path, seed: u64, extra: &[&str]) -> PathBuf {
    let seed = seed.to_string();
    let mut args = vec![
        "generate",
        "--output-dir",
        s(dir),
        "--seed",
        &seed,
        "--nv",
        "4096",
        "--n-sources",
        "700",
        "--d-max",
        "200",
        "--n-windows",
        "8",
        "--dest-pool",
        "512",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("stream.csv")
}

#[test]
fn tiny_fixture_matches_golden_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["analyze", "--input", s(&fixture("tiny.csv")), "--nv", "3", "--output-dir", s(&out)]);
    for (written, golden) in [
        ("aggregates.tsv", "tiny_aggregates.tsv"),
        ("hist_source_packets.tsv", "tiny_hist_source_packets.tsv"),
        ("hist_dest_fanin.tsv", "tiny_hist_dest_fanin.tsv"),
    ] {
        assert_eq!(
            fs::read_to_string(out.join(written)).unwrap(),
            fs::read_to_string(fixture(golden)).unwrap(),
            "{written}"
        );
    }
}

#[test]
fn analyze_writes_one_row_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), 1, &[]);
    ok(&["analyze", "--input", s(&input), "--nv", "4096", "--output-dir", s(dir.path())]);
    let table = fs::read_to_string(dir.path().join("aggregates.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split('\t').nth(3) == Some("4096")));
}

#[test]
fn anonymized_tables_equal_plain_tables() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), 2, &[]);
    let (plain, anon, filed) = (dir.path().join("plain"), dir.path().join("anon"), dir.path().join("filed"));
    ok(&["analyze", "--input", s(&input), "--nv", "4096", "--output-dir", s(&plain)]);
    ok(&[
        "analyze", "--input", s(&input), "--nv", "4096", "--output-dir", s(&anon), "--anonymize", "--key-env",
        "NETOBS_TEST_KEY",
    ]);
    let key_file = dir.path().join("key.hex");
    fs::write(&key_file, KEY_HEX).unwrap();
    ok(&[
        "analyze", "--input", s(&input), "--nv", "4096", "--output-dir", s(&filed), "--anonymize", "--key-file",
        s(&key_file),
    ]);
    for entry in fs::read_dir(&plain).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(plain.join(&name)).unwrap();
        assert_eq!(a, fs::read(anon.join(&name)).unwrap(), "{name:?}");
        assert_eq!(a, fs::read(filed.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn key_sources_conflict_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let key_file = dir.path().join("key.hex");
    fs::write(&key_file, KEY_HEX).unwrap();
    let out = netobs(&[
        "analyze", "--input", s(&fixture("tiny.csv")), "--nv", "3", "--anonymize", "--key-env", "NETOBS_TEST_KEY",
        "--key-file", s(&key_file),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = netobs(&["analyze", "--input", s(&fixture("tiny.csv")), "--nv", "3", "--anonymize"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_input_and_short_input_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = netobs(&["analyze", "--input", s(&dir.path().join("missing.csv")), "--nv", "3"]);
    assert_eq!(out.status.code(), Some(3));
    let out = netobs(&["analyze", "--input", s(&fixture("tiny.csv")), "--nv", "4", "--output-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no complete window"));
}

#[test]
fn single_window_fit_names_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let out = netobs(&["fit", "--input", s(&fixture("tiny.csv")), "--nv", "3", "--output-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scaling"));
}

#[test]
fn full_loop_is_deterministic_and_recovers_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> (Vec<u8>, Vec<u8>, Value) {
        let d = dir.path().join(name);
        let input = generate(&d, 3, &[]);
        ok(&["analyze", "--input", s(&input), "--nv", "4096", "--output-dir", s(&d)]);
        ok(&[
            "fit", "--input", s(&input), "--nv", "4096", "--output-dir", s(&d), "--site-label", "synthetic",
            "--distribution-quantity", "source_packets",
        ]);
        let model = fs::read(d.join("model.json")).unwrap();
        let nv = "4096";
        let predicted = ok(&["predict", "--model", s(&d.join("model.json")), "--nv", nv, "--d", "64", "--t", "0"]);
        (fs::read(d.join("aggregates.tsv")).unwrap(), model, serde_json::from_str(&predicted).unwrap())
    };
    let (agg_a, model_a, pred_a) = run("a");
    let (agg_b, model_b, pred_b) = run("b");
    assert_eq!(agg_a, agg_b);
    assert_eq!(model_a, model_b);
    assert_eq!(pred_a, pred_b);
    assert_eq!(fs::read(dir.path().join("a/stream.csv")).unwrap(), fs::read(dir.path().join("b/stream.csv")).unwrap());
    assert_eq!(fs::read(dir.path().join("a/truth.json")).unwrap(), fs::read(dir.path().join("b/truth.json")).unwrap());

    let m: Value = serde_json::from_slice(&model_a).unwrap();
    assert_eq!(m["site_label"], "synthetic");
    let f = |k: &str| m[k].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f("gamma")));
    assert!((f("lambda") - 2.0).abs() <= 0.3, "lambda {}", f("lambda"));
    assert!((f("delta") - 1.0).abs() <= 1.0, "delta {}", f("delta"));
    assert!((f("t_half") - f("beta").powf(1.0 / f("alpha"))).abs() < 1e-9);
    assert_eq!(pred_a["probability"], 1.0);
}

#[test]
fn predict_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(&model, r#"{"gamma":0.5,"coefficient":1.0,"delta":1.0,"lambda":2.0,"scale":1.0,"alpha":0.8,"beta":10.0,"t_half":17.78279410038923}"#).unwrap();
    let query = |nv: &str, d: &str, t: &str| -> Value {
        serde_json::from_str(&ok(&["predict", "--model", s(&model), "--nv", nv, "--d", d, "--t", t])).unwrap()
    };
    assert_eq!(query("1048576", "1024", "0")["probability"], 1.0);
    assert_eq!(query("1073741824", "2", "0")["factors"]["visibility"].as_f64().unwrap(), 1.0 / 15.0);
    let mut last = f64::INFINITY;
    for t in 0..50 {
        let p = query("1048576", "300", &(t * 7).to_string())["probability"].as_f64().unwrap();
        assert!(p <= last, "t = {}: {p} after {last}", t * 7);
        last = p;
    }
    let one = query("1048576", "1", "0");
    assert_eq!(one["zero_visibility"], true);
    assert_eq!(one["probability"], 0.0);
    let out = netobs(&["predict", "--model", s(&model), "--nv", "1048576", "--d", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_contract() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), 4, &[]);
    let text = fs::read_to_string(&input).unwrap();
    assert_eq!(text.lines().count(), 1 + 8 * 4096);
    let truth: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["windows"].as_array().unwrap().len(), 8);
    assert_eq!(truth["scenario"]["seed"], 4);

    let out = netobs(&["generate", "--output-dir", s(dir.path()), "--n-sources", "100"]);
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("need at least"), "{msg}");
}

#[test]
fn correlation_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let input = generate(dir.path(), 5, &["--two-observers"]);
    let b = dir.path().join("observer_b.csv");
    ok(&["selfcorr", "--input", s(&input), "--nv", "4096", "--output-dir", s(dir.path())]);
    let curve = fs::read_to_string(dir.path().join("selfcorr.tsv")).unwrap();
    assert_eq!(curve.lines().next(), Some("x\tvalue\tsigma\tn\tsigma_source"));
    assert_eq!(curve.lines().count(), 1 + 8);
    let fit: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("cauchy.json")).unwrap()).unwrap();
    assert!(fit["t_half"].as_f64().unwrap() > 0.0);

    ok(&["crosscorr", "--input", s(&input), "--nv", "4096", "--observer-b", s(&b), "--output-dir", s(dir.path())]);
    let cross = fs::read_to_string(dir.path().join("crosscorr.tsv")).unwrap();
    assert_eq!(cross.lines().next(), Some("x\tvalue\tsigma\tn\tmodel"));
    for line in cross.lines().skip(1) {
        let cols: Vec<f64> = line.split('\t').map(|c| c.parse().unwrap()).collect();
        if cols[0] == 0.0 {
            assert_eq!(cols[1], 0.0, "single-packet sources are never visible");
        }
        if cols[4] == 1.0 {
            assert_eq!(cols[1], 1.0);
        }
    }
}
