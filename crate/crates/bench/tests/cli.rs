mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_subcommand_reports_and_accepts_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, common::TINY).unwrap();
    let out = dir.path().join("out");
    let o = bench(&[
        "run",
        "--config",
        arg(&cfg),
        "--out",
        arg(&out),
        "--k-shots",
        "2",
        "--workers",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("frac_1.0") && stdout.contains("2_shot"));
    assert!(!stdout.contains("empty_refs"));
    let csv = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        code(&bench(&["run", "--config", arg(&missing), "--out", "x"])),
        2
    );

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("unknown_key = 1\n{}", common::TINY)).unwrap();
    assert_eq!(
        code(&bench(&["run", "--config", arg(&bad), "--out", "x"])),
        2
    );

    let bad_fraction = dir.path().join("fraction.toml");
    fs::write(
        &bad_fraction,
        common::TINY.replace("fraction = 0.5", "fraction = 1.5"),
    )
    .unwrap();
    assert_eq!(
        code(&bench(&[
            "run",
            "--config",
            arg(&bad_fraction),
            "--out",
            "x"
        ])),
        2
    );

    assert_eq!(code(&bench(&["run"])), 2);
    assert_eq!(code(&bench(&["--help"])), 0);
}

#[test]
fn stepwise_subcommands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p);
    let ok = |o: Output| assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ok(bench(&[
        "synth",
        "--preset",
        "low-clutter",
        "--n-images",
        "30",
        "--seed",
        "2",
        "--out",
        arg(&d("data")),
    ]));
    let ann = d("data/annotations.json");
    assert!(d("data/scene_manifest.json").is_file());
    ok(bench(&[
        "split",
        "--annotations",
        arg(&ann),
        "--out",
        arg(&d("splits")),
    ]));
    for s in 0..4 {
        assert!(d(&format!("splits/split{s}.json")).is_file());
    }
    ok(bench(&[
        "subsample",
        "--annotations",
        arg(&ann),
        "--split",
        arg(&d("splits/split0.json")),
        "--mode",
        "instance-matched-all",
        "--fraction",
        "0.5",
        "--out",
        arg(&d("sub")),
    ]));
    let model_cfg = d("model.toml");
    fs::write(&model_cfg, "[train]\nepochs = 1\nepisodes_per_epoch = 8\n").unwrap();
    ok(bench(&[
        "train",
        "--config",
        arg(&model_cfg),
        "--annotations",
        arg(&d("sub/annotations.json")),
        "--images",
        arg(&d("data")),
        "--out",
        arg(&d("model")),
    ]));
    assert!(d("model/loss.csv").is_file());
    ok(bench(&[
        "eval",
        "--model",
        arg(&d("model/model.bin")),
        "--annotations",
        arg(&ann),
        "--images",
        arg(&d("data")),
        "--split",
        arg(&d("sub/manifest.json")),
        "--out",
        arg(&d("eval")),
    ]));
    let result: serde_json::Value =
        serde_json::from_slice(&fs::read(d("eval/result.json")).unwrap()).unwrap();
    assert!(result["per_category"]
        .as_object()
        .is_some_and(|m| !m.is_empty()));
    assert!(d("eval/detections.jsonl").is_file());

    // a missing model is a stage failure, not a config error
    let o = bench(&[
        "eval",
        "--model",
        arg(&d("nope.bin")),
        "--annotations",
        arg(&ann),
        "--images",
        arg(&d("data")),
        "--split",
        arg(&d("sub/manifest.json")),
        "--out",
        arg(&d("eval2")),
    ]);
    assert_eq!(code(&o), 4);
}
