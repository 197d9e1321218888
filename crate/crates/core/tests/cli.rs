//! End-to-end checks of the command-line binary: exit codes, output file
//! layout, and report formats. Training steps use a deliberately tiny
//! architecture so each test stays fast.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mobileiqa"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code (killed by signal?)")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Fresh per-test scratch directory under the system temp dir.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mobileiqa-cli-{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_MODEL: &str = r#"{
  "model": {"stage_channels": [2, 3, 4, 5, 6], "c_mal": 8, "d": 16, "m": 2},
  "train": {"epochs": 1, "batch_size": 4, "lr": 0.001, "seed": 5}
}"#;

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY_MODEL).unwrap();
    path
}

fn gen_tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = run(&[
        "gen-data", "--seed", "4", "--count", "10", "--size", "32", "--out", s(&data),
    ]);
    assert_eq!(code(&out), 0, "gen-data failed: {}", stderr(&out));
    data
}

fn train_tiny_teacher(dir: &Path, cfg: &Path, data: &Path) -> PathBuf {
    let out_dir = dir.join("teacher");
    let out = run(&[
        "train-teacher",
        "--config",
        s(cfg),
        "--data",
        s(data),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "train-teacher failed: {}", stderr(&out));
    out_dir.join("teacher.ckpt")
}

#[test]
fn help_lists_every_command_and_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for cmd in [
        "gen-data",
        "train-teacher",
        "distill",
        "eval",
        "inspect",
        "count-macs",
    ] {
        assert!(text.contains(cmd), "--help does not mention {cmd}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["--no-such-flag"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    // Missing required --teacher.
    assert_eq!(code(&run(&["distill", "--data", "x", "--out", "y"])), 2);
}

#[test]
fn config_errors_exit_two() {
    let dir = scratch("cfg-errors");
    let out = run(&["gen-data", "--count", "2", "--out", s(&dir.join("d"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));

    let out = run(&["gen-data", "--size", "16", "--out", s(&dir.join("d"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    // Unknown --set key, rejected before any data access.
    let out = run(&[
        "train-teacher", "--set", "train.bogus=1", "--data", "x", "--out", "y",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));

    // Unknown ablation name.
    let out = run(&[
        "train-teacher", "--ablation", "no-head", "--data", "x", "--out", "y",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("no-head"), "{}", stderr(&out));

    // Structurally valid config that fails validation.
    let bad = dir.join("bad.json");
    fs::write(&bad, r#"{"model": {"stage_channels": []}}"#).unwrap();
    let out = run(&[
        "train-teacher", "--config", s(&bad), "--data", "x", "--out", "y",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn missing_inputs_exit_one() {
    let dir = scratch("missing-inputs");
    let out = run(&[
        "eval",
        "--ckpt",
        s(&dir.join("nope.ckpt")),
        "--data",
        s(&dir.join("nodata")),
        "--out",
        s(&dir.join("m.csv")),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn gen_data_writes_manifest_and_reports_split() {
    let dir = scratch("gen-data");
    let data = dir.join("data");
    let out = run(&[
        "gen-data", "--seed", "1", "--count", "10", "--size", "32", "--out", s(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("8 train + 2 val"), "{}", stdout(&out));
    let manifest = fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("path,mos,seed,distortions\n"));
    assert_eq!(manifest.lines().count(), 11);
    assert!(data.join("train_0000.ppm").exists());
    assert!(data.join("val_0001.ppm").exists());
}

#[test]
fn train_run_directory_has_config_checkpoint_and_report() {
    let dir = scratch("train-outputs");
    let cfg = write_tiny_config(&dir);
    let data = gen_tiny_data(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "train-teacher",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let report = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("epoch,l,l_d,score_loss,val_srcc,val_plcc,lr\n"));
    assert_eq!(report.lines().count(), 2, "one epoch -> one record");

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["global_mixing"], serde_json::json!(true));
    assert_eq!(resolved["train"]["epochs"], serde_json::json!(1));
    assert!(out_dir.join("teacher.ckpt").exists());
}

#[test]
fn distill_then_eval_and_inspect_produce_expected_files() {
    let dir = scratch("distill-chain");
    let cfg = write_tiny_config(&dir);
    let data = gen_tiny_data(&dir);
    let teacher = train_tiny_teacher(&dir, &cfg, &data);

    let student_dir = dir.join("student");
    let out = run(&[
        "distill",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--out",
        s(&student_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let student = student_dir.join("student.ckpt");
    assert!(student.exists());
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(student_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["model"]["global_mixing"], serde_json::json!(false));

    // Plain eval: exactly the metric header plus one row.
    let csv = dir.join("metrics.csv");
    let out = run(&[
        "eval", "--ckpt", s(&student), "--data", s(&data), "--out", s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("krcc,srcc,plcc,rmse,mae\n"), "{text}");
    assert_eq!(text.lines().count(), 2, "{text}");
    assert_eq!(stdout(&out).trim(), text.trim(), "eval should echo the CSV");

    // Resolution sweep: one row per requested resolution.
    let sweep = dir.join("sweep.csv");
    let out = run(&[
        "eval",
        "--ckpt",
        s(&student),
        "--data",
        s(&data),
        "--out",
        s(&sweep),
        "--resize",
        "8,16,32",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&sweep).unwrap();
    assert!(
        text.starts_with("resolution,krcc,srcc,plcc,rmse,mae\n"),
        "{text}"
    );
    assert_eq!(text.lines().count(), 4, "{text}");
    for (line, r) in text.lines().skip(1).zip(["8,", "16,", "32,"]) {
        assert!(line.starts_with(r), "{text}");
    }

    let insp = dir.join("inspect");
    let out = run(&[
        "inspect",
        "--ckpt",
        s(&student),
        "--teacher",
        s(&teacher),
        "--data",
        s(&data),
        "--out",
        s(&insp),
        "--probe",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let self_sim = fs::read_to_string(insp.join("self_similarity.csv")).unwrap();
    assert!(self_sim.starts_with("mal_0,mal_1\n"), "{self_sim}");
    assert_eq!(self_sim.lines().count(), 3, "m=2 -> 2x2 matrix: {self_sim}");
    assert!(insp.join("cross_similarity.csv").exists());
    for j in 0..2 {
        for i in 0..2 {
            let map = insp.join(format!("attn_{j:02}_mal_{i}.pgm"));
            let bytes = fs::read(&map).unwrap_or_else(|_| panic!("missing {map:?}"));
            assert!(bytes.starts_with(b"P5\n"), "attention map should be PGM");
        }
    }
}

#[test]
fn distill_rejects_teacher_without_global_mixing() {
    let dir = scratch("distill-bad-teacher");
    let cfg = write_tiny_config(&dir);
    let data = gen_tiny_data(&dir);
    let teacher = train_tiny_teacher(&dir, &cfg, &data);

    let student_dir = dir.join("student");
    let out = run(&[
        "distill",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--teacher",
        s(&teacher),
        "--out",
        s(&student_dir),
    ]);
    assert_eq!(code(&out), 0, "distilling from a proper teacher works");

    // A student checkpoint is not an acceptable teacher.
    let out = run(&[
        "distill",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--teacher",
        s(&student_dir.join("student.ckpt")),
        "--out",
        s(&dir.join("student2")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn count_macs_prints_table_with_total() {
    let dir = scratch("count-macs");
    let cfg = write_tiny_config(&dir);
    let out = run(&["count-macs", "--config", s(&cfg), "--resolution", "32"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("total"), "{text}");
    let again = run(&["count-macs", "--config", s(&cfg), "--resolution", "32"]);
    assert_eq!(stdout(&again), text, "count-macs must be deterministic");
}

#[test]
fn set_overrides_reach_the_saved_config() {
    let dir = scratch("set-overrides");
    let cfg = write_tiny_config(&dir);
    let data = gen_tiny_data(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "train-teacher",
        "--config",
        s(&cfg),
        "--set",
        "train.alpha=0.5",
        "--set",
        "model.m=3",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["alpha"], serde_json::json!(0.5));
    assert_eq!(resolved["model"]["m"], serde_json::json!(3));
}
