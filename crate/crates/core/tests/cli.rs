use std::path::Path;
use std::process::{Command, Output};

use prompt_diffuser::datasets::{dataset_file_name, Dataset};
use prompt_diffuser::envs::{Family, TaskSplit, Tier};

const BIN: &str = env!("CARGO_BIN_EXE_prompt-diffuser");

const TINY: &str = "seeds = [0]
[plm]
layers = 1
dim = 8
history_len = 4
[plm_train]
iterations = 5
batch_size = 2
[eval]
episodes = 1
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_one_file_per_task_and_tier() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--family",
        "vel",
        "--tier",
        "all",
        "--episodes",
        "2",
        "--seed",
        "3",
        "--out",
        s(dir.path()),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let split = TaskSplit::standard(Family::Vel);
    for &task in split.train.iter().chain(&split.test) {
        for tier in Tier::ALL {
            let path = dir.path().join(dataset_file_name(Family::Vel, task, tier));
            let d = Dataset::read(&path).unwrap();
            assert_eq!(d.header.task_index, task);
            assert_eq!(d.header.tier, tier);
            assert_eq!(d.trajectories.len(), 2);
        }
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn gen_data_single_tier() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--family",
        "dir-1d",
        "--tier",
        "medium",
        "--episodes",
        "1",
        "--seed",
        "0",
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success());
    let files = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "jsonl"))
        .count();
    assert_eq!(files, 2);
    assert!(dir
        .path()
        .join(dataset_file_name(Family::Dir1d, 1, Tier::Medium))
        .exists());
}

#[test]
fn eval_prints_report_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let plm = dir.path().join("plm");
    let evald = dir.path().join("eval");
    assert!(run(&[
        "gen-data",
        "--family",
        "dir-1d",
        "--episodes",
        "2",
        "--seed",
        "0",
        "--out",
        s(&data),
    ])
    .status
    .success());
    let out = run(&[
        "pretrain-plm",
        "--data",
        s(&data),
        "--family",
        "dir-1d",
        "--config",
        s(&cfg),
        "--seed",
        "0",
        "--out",
        s(&plm),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(plm.join("plm_train.csv").exists());
    let out = run(&[
        "eval",
        "--plm",
        s(&plm.join("plm.ckpt")),
        "--provider",
        "expert-trajectory",
        "--data",
        s(&data),
        "--family",
        "dir-1d",
        "--config",
        s(&cfg),
        "--seed",
        "0",
        "--out",
        s(&evald),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("expert-trajectory"), "{stdout}");
    let csv = std::fs::read_to_string(evald.join("eval.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("family,provider,seed"));
    // one row per dir-1d task
    assert_eq!(lines.count(), 2);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    // well-formed arguments, missing input
    let out = run(&[
        "eval",
        "--plm",
        s(&dir.path().join("missing.ckpt")),
        "--provider",
        "none",
        "--family",
        "vel",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(
        run(&["report", "--dir", s(dir.path())]).status.code(),
        Some(2)
    );
}
