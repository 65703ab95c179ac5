use std::path::Path;
use std::process::{Command, Output};

fn issm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_issm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lattice(dir: &Path) -> std::path::PathBuf {
    let mut text = String::new();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                text.push_str(&format!("{i} {j} {k}\n"));
            }
        }
    }
    let p = dir.join("lattice.txt");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn gen_scene_writes_header_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.destpc");
    let b = dir.path().join("b.destpc");
    for p in [&a, &b] {
        let o = issm(&["gen-scene", "--boxes", "3", "--seed", "7", "-o", path(p)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..8], b"DESTPC1\0");
    let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    assert_eq!(m, 3 * 200 + 500);
    assert_eq!(bytes.len(), 16 + 12 * m);
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let gt_a = std::fs::read(dir.path().join("a.destpc.gt.json")).unwrap();
    let gt_b = std::fs::read(dir.path().join("b.destpc.gt.json")).unwrap();
    assert_eq!(gt_a, gt_b);
}

#[test]
fn gen_scene_rejects_empty_scene() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.destpc");
    let o = issm(&["gen-scene", "--boxes", "0", "--noise", "0", "-o", path(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert!(!p.exists());
}

#[test]
fn serialize_single_point() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.txt");
    std::fs::write(&p, "0.5 1.5 -2\n").unwrap();
    let o = issm(&["serialize", path(&p)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "0\n");
}

#[test]
fn serialize_orders_differ_on_lattice() {
    let dir = tempfile::tempdir().unwrap();
    let p = lattice(dir.path());
    let xyz = issm(&["serialize", path(&p), "--order", "xyz"]);
    let zyx = issm(&["serialize", path(&p), "--order", "zyx"]);
    assert_eq!(xyz.status.code(), Some(0));
    assert_eq!(zyx.status.code(), Some(0));
    let parse = |o: &Output| -> Vec<usize> { stdout(o).lines().map(|l| l.parse().unwrap()).collect() };
    let (a, b) = (parse(&xyz), parse(&zyx));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..27).collect::<Vec<_>>());
    assert_ne!(a, b);
}

#[test]
fn serialize_score_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = lattice(dir.path());
    let o = issm(&["serialize", path(&p), "--score"]);
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let v: f64 = last.strip_prefix("# locality_score: ").unwrap().parse().unwrap();
    assert!(v.is_finite() && v > 0.0);
}

#[test]
fn serialize_rejects_bad_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = lattice(dir.path());
    let o = issm(&["serialize", path(&p), "--order", "abc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_is_exit_two() {
    let o = issm(&["serialize", "/nonexistent/file.destpc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn demo_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s.destpc");
    assert_eq!(issm(&["gen-scene", "--seed", "3", "-o", path(&scene)]).status.code(), Some(0));
    let run = || issm(&["demo", path(&scene), "--layers", "2", "--states", "8"]);
    let (a, b) = (run(), run());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 8 + 1);
    for layer in 0..2 {
        let n = lines.iter().filter(|v| v["layer"] == layer).count();
        assert_eq!(n, 8);
    }
    let loss = lines.last().unwrap()["summary"]["objectness_focal_loss"].as_f64().unwrap();
    assert!(loss.is_finite() && loss >= 0.0);
}

#[test]
fn demo_config_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s.txt");
    assert_eq!(
        issm(&["gen-scene", "--boxes", "1", "--noise", "50", "-o", path(&scene)]).status.code(),
        Some(0)
    );
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 5, "decoder": {"num_layers": 3, "num_states": 4}}"#).unwrap();
    let o = issm(&["demo", path(&scene), "--config", path(&cfg), "--layers", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 4 + 1);

    std::fs::write(&cfg, r#"{"decoder": {"bogus": 1}}"#).unwrap();
    let o = issm(&["demo", path(&scene), "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let o = issm(&["demo", path(&scene), "--layers", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn demo_weight_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("s.destpc");
    let prefix = dir.path().join("w");
    assert_eq!(
        issm(&["gen-scene", "--boxes", "1", "--noise", "40", "-o", path(&scene)]).status.code(),
        Some(0)
    );
    let base = ["demo", path(&scene), "--layers", "1", "--states", "4"];
    let saved = issm(&[&base[..], &["--save-weights", path(&prefix)]].concat());
    assert_eq!(saved.status.code(), Some(0));
    assert!(dir.path().join("w.bin").exists() && dir.path().join("w.json").exists());
    let loaded = issm(&[&base[..], &["--load-weights", path(&prefix)]].concat());
    assert_eq!(loaded.status.code(), Some(0));
    assert_eq!(loaded.stdout, saved.stdout);
    std::fs::write(dir.path().join("w.json"), "{}").unwrap();
    let broken = issm(&[&base[..], &["--load-weights", path(&prefix)]].concat());
    assert_eq!(broken.status.code(), Some(2));
}

#[test]
fn verify_exit_codes() {
    let ok = issm(&["verify", "--suite", "attn_recurrence", "--seeds", "3", "--json"]);
    assert_eq!(ok.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["reports"].as_array().unwrap().len(), 1);

    let bad = issm(&["verify", "--suite", "scan_conv", "--seeds", "2", "--perturb-scan", "1e-6"]);
    assert_eq!(bad.status.code(), Some(1));
    let unknown = issm(&["verify", "--suite", "nope"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn bench_row_count() {
    let o = issm(&["bench", "--m-list", "64,128", "--k", "4", "--e", "4", "--repeats", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1 + 2 + 2);
    assert!(out.contains("scan_slope") && out.contains("attention_slope"));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(issm(&["--help"]).status.code(), Some(0));
    assert_eq!(issm(&["--version"]).status.code(), Some(0));
    assert_eq!(issm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(issm(&[]).status.code(), Some(2));
}
