use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfm-guide"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["mine", "--help"]).status.code(), Some(0));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["generate"]).status.code(), Some(1));
    let missing = bin(&[
        "extract-prototypes",
        "--index",
        "/nonexistent/index.json",
        "--out",
        "/tmp/x.json",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
}

#[test]
fn invalid_config_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"mining": {"tau_low": 1.5}}"#).unwrap();
    let out = dir.path().join("world");
    ok(&[
        "generate",
        "--images",
        "6",
        "--labeled",
        "0.5",
        "--out",
        s(&out),
    ]);
    let code = bin(&[
        "--config",
        s(&cfg),
        "mine",
        "--index",
        s(&out.join("index.json")),
        "--predictions",
        s(&dir.path().join("none.json")),
        "--out",
        s(&dir.path().join("m.json")),
    ])
    .status
    .code();
    assert_eq!(code, Some(1));
}

#[test]
fn generate_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "--seed",
        "4",
        "generate",
        "--images",
        "12",
        "--workers",
        "1",
        "--out",
        s(&a),
    ]);
    ok(&[
        "--seed",
        "4",
        "generate",
        "--images",
        "12",
        "--workers",
        "3",
        "--out",
        s(&b),
    ]);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 12);
    for n in names {
        assert_eq!(
            std::fs::read(a.join(&n)).unwrap(),
            std::fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let world = d.join("world");
    let index = world.join("index.json");
    let protos = d.join("protos.json");
    let model = d.join("model.json");
    ok(&[
        "--seed",
        "2",
        "generate",
        "--images",
        "30",
        "--labeled",
        "0.2",
        "--out",
        s(&world),
    ]);
    ok(&[
        "extract-prototypes",
        "--index",
        s(&index),
        "--k",
        "3",
        "--out",
        s(&protos),
    ]);
    ok(&[
        "--seed",
        "2",
        "pretrain",
        "--images",
        "30",
        "--labeled",
        "0.2",
        "--steps",
        "20",
        "--out",
        s(&model),
    ]);
    ok(&[
        "mine",
        "--index",
        s(&index),
        "--protos",
        s(&protos),
        "--checkpoint",
        s(&model),
        "--tau-high",
        "0.8",
        "--out",
        s(&d.join("mined.json")),
        "--report",
        s(&d.join("report.json")),
    ]);
    ok(&[
        "align-eval",
        "--index",
        s(&index),
        "--protos",
        s(&protos),
        "--checkpoint",
        s(&model),
        "--out",
        s(&d.join("align.json")),
    ]);
    ok(&[
        "--seed",
        "2",
        "simulate",
        "--images",
        "30",
        "--labeled",
        "0.2",
        "--mode",
        "vpm",
        "--steps",
        "20",
        "--init",
        s(&model),
        "--out",
        s(&d.join("run.jsonl")),
    ]);
    ok(&[
        "report",
        "--log",
        s(&d.join("run.jsonl")),
        "--out",
        s(&d.join("curve.csv")),
    ]);

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    let f1 = report["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let align: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("align.json")).unwrap()).unwrap();
    assert!(align["image_alignment"].as_f64().unwrap().is_finite());
    let csv = std::fs::read_to_string(d.join("curve.csv")).unwrap();
    assert!(csv.starts_with("step,total,"));
    // header, the step-0 baseline, then one row per step
    assert_eq!(csv.lines().count(), 22);
}
