//! End-to-end runs of the `crossinput` binary.

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossinput"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], needle: &str) {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains(needle),
        "{args:?}: expected `{needle}` in\n{err}"
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_CORPUS: [&str; 4] = [
    "--set",
    "corpus.num_sequences=3",
    "--set",
    "corpus.num_frames=60",
];

#[test]
fn simulate_train_track_evaluate_plot() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let ckpt = dir.path().join("model.json");
    let result = dir.path().join("result.txt");
    let report = dir.path().join("report.csv");
    let svg = dir.path().join("plot.svg");

    let mut sim = vec!["--seed", "3", "simulate", p(&corpus)];
    sim.extend(SMALL_CORPUS);
    assert!(ok(&sim).contains("wrote 3 sequences"));

    let out = ok(&[
        "--seed",
        "3",
        "--set",
        "train.max_steps=200",
        "--set",
        "train.eval_interval=100",
        "--set",
        "train.heldout_windows=5",
        "train",
        p(&corpus),
        p(&ckpt),
    ]);
    assert!(out.contains("trained 200 steps"), "{out}");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 201);

    let seq = corpus.join("seq_0000");
    ok(&["track", p(&ckpt), p(&seq.join("det.txt")), p(&result)]);
    let out = ok(&["evaluate", p(&result), p(&seq.join("gt.txt")), p(&report)]);
    assert!(out.contains("MOTA ") && out.contains("IDF1 "), "{out}");
    assert!(std::fs::read_to_string(&report).unwrap().lines().count() >= 2);

    ok(&["plot", p(&result), p(&seq.join("gt.txt")), p(&svg)]);
    let drawing = std::fs::read_to_string(&svg).unwrap();
    assert!(drawing.starts_with("<svg") || drawing.starts_with("<?xml"));
    assert!(drawing.contains("stroke-dasharray"));

    let base = dir.path().join("baseline.txt");
    ok(&[
        "track",
        "unused",
        p(&seq.join("det.txt")),
        p(&base),
        "--baseline",
        "iou",
    ]);
    assert!(base.exists());
    assert!(t0.elapsed() < Duration::from_secs(300));
}

#[test]
fn simulation_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["--seed", "7", "simulate", p(out)];
        args.extend(SMALL_CORPUS);
        ok(&args);
    }
    for name in ["det.txt", "gt.txt"] {
        let x = std::fs::read(a.join("seq_0001").join(name)).unwrap();
        let y = std::fs::read(b.join("seq_0001").join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs");
    }
}

#[test]
fn ground_truth_scored_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let mut args = vec!["simulate", p(&corpus)];
    args.extend(SMALL_CORPUS);
    ok(&args);
    let gt = corpus.join("seq_0000").join("gt.txt");
    let out = ok(&["evaluate", p(&gt), p(&gt), p(&dir.path().join("r.csv"))]);
    assert!(out.contains("MOTA 1.000"), "{out}");
    assert!(out.contains("IDF1 1.000"), "{out}");
}

#[test]
fn errors_name_their_cause() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    fails_with(
        &[
            "track",
            "x",
            p(&missing),
            p(&dir.path().join("r.txt")),
            "--baseline",
            "iou",
        ],
        "file not found",
    );

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    fails_with(
        &["--config", p(&bad), "simulate", p(&dir.path().join("s"))],
        "malformed config",
    );
    fails_with(
        &[
            "--set",
            "train.bogus=1",
            "simulate",
            p(&dir.path().join("s")),
        ],
        "unknown config key",
    );

    let corpus = dir.path().join("c");
    let mut args = vec!["simulate", p(&corpus)];
    args.extend(SMALL_CORPUS);
    ok(&args);
    fails_with(
        &[
            "--set",
            "train.model.appearance_dim=8",
            "train",
            p(&corpus),
            p(&dir.path().join("m.json")),
        ],
        "dimension mismatch",
    );
}
