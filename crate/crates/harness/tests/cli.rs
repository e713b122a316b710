use std::process::Command;

use nvcim_harness::config::ExperimentConfig;
use nvcim_harness::sweep::CELLS_HEADER;

fn nvcim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nvcim"))
}

#[test]
fn report_on_empty_input_prints_header() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("cells.csv");
    std::fs::write(&empty, format!("{CELLS_HEADER}\n")).unwrap();
    let out = nvcim()
        .args(["report", "--out"])
        .arg(dir.path().join("r"))
        .arg(&empty)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("method"));
}

#[test]
fn report_rejects_foreign_csv() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("x.csv");
    std::fs::write(&bad, "a,b\n1,2\n").unwrap();
    let out = nvcim().args(["report", "--out"]).arg(dir.path()).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unexpected header"));
}

#[test]
fn config_round_trips_through_text() {
    let mut cfg = ExperimentConfig::default();
    cfg.sigmas = vec![0.05, 0.2];
    cfg.delta_acc = f64::INFINITY;
    cfg.runs = 3;
    let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = d.join("toy.nvnet");
    let run = |args: &[&str]| {
        let out = nvcim().current_dir(d).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let m = model.to_str().unwrap();
    run(&["train", "--model", "mlp-toy", "--epochs", "5", "--out", m]);
    run(&["rank", "--model", "mlp-toy", "--model-path", m, "--out", "rank"]);
    let ranked = std::fs::read_to_string(d.join("rank/rank.csv")).unwrap();
    assert_eq!(ranked.lines().count(), 1 + 195);
    run(&[
        "program", "--model", "mlp-toy", "--model-path", m, "--strategy", "swim", "--sigma", "0.5",
        "--delta-acc", "inf", "--granularity", "10", "--out", "prog",
    ]);
    let traj = std::fs::read_to_string(d.join("prog/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 3);
    let table = run(&[
        "sweep", "--model", "mlp-toy", "--model-path", m, "--runs", "2", "--sigma", "0.5",
        "--strategy", "swim,none", "--seed", "3", "--out", "sweep",
    ]);
    assert!(table.contains("swim"));
    let meta = std::fs::read_to_string(d.join("sweep/meta.txt")).unwrap();
    assert!(meta.contains("# test_subset = false"));
    assert!(ExperimentConfig::parse(&meta).is_ok());
}
