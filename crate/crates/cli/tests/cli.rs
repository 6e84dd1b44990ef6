use std::path::Path;
use std::process::{Command, Output};

use protoad::{write_tensor, FeatureTensor};

fn protoad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = protoad(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn basis(c: usize, k: usize) -> Vec<f32> {
    let mut v = vec![0.0; c];
    v[k] = 1.0;
    v
}

fn write_grid(path: &Path, h: usize, w: usize, c: usize, cell: impl Fn(usize) -> Vec<f32>) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let data: Vec<f32> = (0..h * w).flat_map(cell).collect();
    write_tensor(&FeatureTensor::new(h, w, c, data).unwrap(), path).unwrap();
}

fn score_value(stdout: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with("S = "))
        .expect("score line");
    line[4..].parse().unwrap()
}

#[test]
fn missing_bank_exits_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("x.pft");
    write_grid(&feats, 2, 2, 4, |_| basis(4, 0));
    let out = protoad(&[
        "score",
        "--bank",
        s(&dir.path().join("missing.ptb")),
        "--features",
        s(&feats),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("missing.ptb"));
}

#[test]
fn features_made_of_prototypes_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let train = root.join("toy/train/good");
    write_grid(&train.join("a.pft"), 4, 4, 8, |i| basis(8, i % 3));
    write_grid(&train.join("b.pft"), 4, 4, 8, |i| basis(8, (i / 4) % 3));
    let bank = dir.path().join("bank.ptb");
    let fitted = ok(&[
        "fit",
        "--root",
        s(&root),
        "--category",
        "toy",
        "--out",
        s(&bank),
    ]);
    assert!(fitted.contains("prototypes: 3"), "{fitted}");

    let probe = dir.path().join("probe.pft");
    write_grid(&probe, 3, 5, 8, |i| basis(8, (i * 7) % 3));
    let out_dir = dir.path().join("scored");
    let scored = ok(&[
        "score",
        "--bank",
        s(&bank),
        "--features",
        s(&probe),
        "--out",
        s(&out_dir),
        "--out-size",
        "32",
    ]);
    assert!(scored.contains("S = 0.000000"), "{scored}");
    assert!(out_dir.join("heatmap.png").is_file());
    let map = protoad::read_tensor(out_dir.join("anomaly_map.pft")).unwrap();
    assert_eq!((map.height(), map.width(), map.channels()), (32, 32, 1));
}

#[test]
fn identical_training_vectors_give_one_prototype() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_grid(&root.join("flat/train/good/only.pft"), 5, 5, 6, |_| {
        vec![3.0, 0.0, 4.0, 0.0, 0.0, 0.0]
    });
    let bank = dir.path().join("bank.ptb");
    let stdout = ok(&[
        "fit",
        "--root",
        s(&root),
        "--category",
        "flat",
        "--out",
        s(&bank),
    ]);
    assert!(stdout.contains("prototypes: 1"), "{stdout}");
    let inspected = ok(&["inspect-bank", "--bank", s(&bank)]);
    assert!(
        inspected.contains("prototypes: 1") && inspected.contains("channels: 6"),
        "{inspected}"
    );
}

#[test]
fn mixed_channel_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    write_grid(&root.join("mix/train/good/a.pft"), 2, 2, 4, |_| basis(4, 1));
    write_grid(&root.join("mix/train/good/b.pft"), 2, 2, 8, |_| basis(8, 1));
    let out = protoad(&[
        "fit",
        "--root",
        s(&root),
        "--category",
        "mix",
        "--out",
        s(&dir.path().join("bank.ptb")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("b.pft") && err.contains("channels"), "{err}");
    assert!(!dir.path().join("bank.ptb").exists());
}

#[test]
fn synth_fit_score_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let small = [
        "--grid",
        "16",
        "--channels",
        "32",
        "--n-train",
        "10",
        "--n-test-normal",
        "6",
        "--n-test-anomalous",
        "6",
    ];
    let mut args = vec!["synth", "--out", s(&data)];
    args.extend(small);
    ok(&args);

    let refused = protoad(&args);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    args.push("--force");
    ok(&args);

    let bank = dir.path().join("bank.ptb");
    let fitted = ok(&[
        "fit",
        "--root",
        s(&data),
        "--category",
        "synthetic",
        "--out",
        s(&bank),
    ]);
    assert!(
        fitted.contains("level 0:") && fitted.contains("selected level: 0"),
        "{fitted}"
    );

    let base = data.join("synthetic/test");
    let score = |item: &Path, tag: &str| {
        let out = dir.path().join(tag);
        score_value(&ok(&[
            "score",
            "--bank",
            s(&bank),
            "--features",
            s(item),
            "--out",
            s(&out),
            "--out-size",
            "64",
        ]))
    };
    let normal = score(&base.join("good/000.pft"), "n");
    let anomalous = score(&base.join("synthetic_defect/000.pft"), "a");
    assert!(
        anomalous > normal,
        "anomalous {anomalous} vs source {normal}"
    );

    let report = dir.path().join("report.txt");
    let printed = ok(&[
        "eval",
        "--root",
        s(&data),
        "--category",
        "synthetic",
        "--bank",
        s(&bank),
        "--out",
        s(&report),
        "--out-size",
        "64",
    ]);
    assert_eq!(std::fs::read_to_string(&report).unwrap(), printed);
    assert!(printed.contains("image_auroc=1.0000"), "{printed}");
}

#[test]
fn eval_refuses_tree_without_anomalies() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--grid",
        "12",
        "--channels",
        "16",
        "--n-train",
        "4",
        "--n-test-normal",
        "3",
        "--n-test-anomalous",
        "0",
    ]);
    let bank = dir.path().join("bank.ptb");
    ok(&[
        "fit",
        "--root",
        s(&data),
        "--category",
        "synthetic",
        "--out",
        s(&bank),
    ]);
    let out = protoad(&[
        "eval",
        "--root",
        s(&data),
        "--category",
        "synthetic",
        "--bank",
        s(&bank),
        "--out",
        s(&dir.path().join("r.txt")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("anomalous"));
}

#[test]
fn bank_files_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--grid",
        "12",
        "--channels",
        "16",
        "--n-train",
        "8",
    ]);
    let one = dir.path().join("one.ptb");
    let four = dir.path().join("four.ptb");
    ok(&[
        "--workers",
        "1",
        "fit",
        "--root",
        s(&data),
        "--category",
        "synthetic",
        "--out",
        s(&one),
    ]);
    ok(&[
        "fit",
        "--workers",
        "4",
        "--root",
        s(&data),
        "--category",
        "synthetic",
        "--out",
        s(&four),
    ]);
    assert_eq!(std::fs::read(one).unwrap(), std::fs::read(four).unwrap());
}
