use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cktwam"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cktwam")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn report_params_paper_table() {
    let o = run(&["report-params", "--config", config("paper.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = include_str!("fixtures/report_params_paper.txt");
    assert_eq!(stdout(&o), golden);
}

#[test]
fn report_params_json() {
    let o = run(&["report-params", "-c", config("paper.json").to_str().unwrap(), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["budget"]["bank_total"], 187_411_465u64);
    assert_eq!(v["budget"]["router"], 2_626_057u64);
    let pct: Vec<String> = v["overheads"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| format!("{:.2}", o["percent"].as_f64().unwrap()))
        .collect();
    assert_eq!(pct, ["9.37", "1.34", "1.17"]);
}

#[test]
fn override_violating_k_le_m_exits_with_validation_code() {
    let o = run(&[
        "report-params",
        "-c",
        config("desk.json").to_str().unwrap(),
        "--set",
        "ckt.k=9",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("k <= M"), "{}", stderr(&o));

    let o = run(&[
        "report-params",
        "-c",
        config("desk.json").to_str().unwrap(),
        "--set",
        "ckt.nope=1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn paper_scale_backbones_are_not_instantiated() {
    let o = run(&["eval-invariants", "-c", config("paper.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("parameter accounting"), "{}", stderr(&o));
}

#[test]
fn zero_step_train_writes_initial_checkpoint_then_route_stats_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "-c",
        config("desk.json").to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("ckpt_000000.ckpt").exists());
    assert!(out.join("report.json").exists());
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");

    let csv = dir.path().join("routes.csv");
    let o = run(&[
        "route-stats",
        "--checkpoint",
        out.join("latest.ckpt").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines().skip(1) {
        let p: f64 = line.split(',').skip(2).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-9);
    }

    // A checkpoint from another model configuration is refused.
    let o = run(&[
        "route-stats",
        "--checkpoint",
        out.join("latest.ckpt").to_str().unwrap(),
        "-c",
        config("desk.json").to_str().unwrap(),
        "--set",
        "ckt.seed=77",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different configuration"), "{}", stderr(&o));
}

#[test]
fn fixed_seed_training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    // Same output directory both times: the checkpoint header echoes it.
    let out = dir.path().join("run");
    for _ in 0..2 {
        let o = run(&[
            "--seed",
            "3",
            "train",
            "-c",
            config("desk.json").to_str().unwrap(),
            "--steps",
            "200",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "training.checkpoint_every=100",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push((
            std::fs::read(out.join("metrics.jsonl")).unwrap(),
            std::fs::read(out.join("ckpt_000200.ckpt")).unwrap(),
        ));
    }
    assert_eq!(files[0].0, files[1].0);
    assert_eq!(files[0].1, files[1].1);
    let lines = String::from_utf8(files[0].0.clone()).unwrap();
    assert_eq!(lines.lines().count(), 200);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in [
        "step",
        "L_total",
        "L_act_avg",
        "L_act_last",
        "L_vid",
        "L_bal",
        "lr",
        "selected_counts",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn eval_invariants_pass_and_detect_rope_on_cross_attention() {
    let desk = config("desk.json");
    let o = run(&["eval-invariants", "-c", desk.to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 5);

    let o = run(&[
        "eval-invariants",
        "-c",
        desk.to_str().unwrap(),
        "--set",
        "student.debug_rope_on_cross_attn=true",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL order_invariance"), "{}", stdout(&o));

    let o = run(&[
        "eval-invariants",
        "-c",
        desk.to_str().unwrap(),
        "--set",
        "ckt.k_g=0",
        "--set",
        "ckt.k_s=0",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let desk = config("desk.json");
    let o = run(&["gradcheck", "-c", desk.to_str().unwrap(), "--entries", "4"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS max relative error"));

    let o = run(&[
        "gradcheck",
        "-c",
        desk.to_str().unwrap(),
        "--entries",
        "4",
        "--inject-fault",
        "gelu",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn precision_env_var_is_validated() {
    let o = bin()
        .args(["report-params", "-c", config("desk.json").to_str().unwrap()])
        .env("CKTWAM_PRECISION", "f16")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("CKTWAM_PRECISION"));
}
