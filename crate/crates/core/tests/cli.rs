use std::path::Path;
use std::process::{Command, Output};

use cilmp::harness::CsvTable;

const TINY: &str = r#"{"classes":3,"epochs":2,
  "data":{"train_per_class":4,"test_per_class":4,"pretrain_pairs":24,"attributes_per_class":2,
          "seen_attributes":2,"background_attributes":2,"caption_len":6},
  "encoder":{"embed_dim":8,"hidden_dim":16,"image_tokens":2,"text_max_len":16,"deep_prompt_layers":1},
  "bank":{"seq_len":4,"width":12},
  "prompt":{"prefix_len":2,"suffix_len":2,"context_len":2,"r_sub":2,"r_proj":2,"r_z":2},
  "pretrain":{"epochs":1,"batch_size":8}}"#;

fn cilmp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cilmp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    dir
}

fn read_csv(p: &Path) -> CsvTable {
    CsvTable::parse(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn train_twice_gives_identical_reports() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = cilmp(&["train", "--config", "c.json", "--seed", "1", "--out", out], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a, b);
    for f in ["timing.json", "loss.csv", "metrics.csv", "checkpoint.bin"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn eval_reproduces_the_trained_metrics() {
    let dir = setup();
    let o = cilmp(&["train", "--config", "c.json", "--seed", "2", "--mode", "no_rd", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let o = cilmp(&["eval", "--checkpoint", "t/checkpoint.bin", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(dir.path().join("t/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("e/eval.csv")).unwrap()
    );
    let o = cilmp(
        &["eval", "--checkpoint", "t/checkpoint.bin", "--config", "c.json", "--mode", "cilmp", "--out", "e"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));
}

#[test]
fn ablate_writes_one_row_per_mode() {
    let dir = setup();
    let o = cilmp(
        &[
            "ablate",
            "--config",
            "c.json",
            "--modes",
            "cilmp,no_rd,no_conditional,no_intervention",
            "--seeds",
            "1,2,3",
            "--out",
            "abl",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_csv(&dir.path().join("abl/ablation.csv"));
    assert_eq!(t.rows.len(), 4);
    let modes: Vec<&str> = t.rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(modes, ["cilmp", "no_rd", "no_conditional", "no_intervention"]);
    let runs = read_csv(&dir.path().join("abl/ablation_runs.csv"));
    assert_eq!(runs.rows.len(), 12);
    let text = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.ends_with('\n'));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = setup();
    let o = cilmp(
        &["ablate", "--config", "c.json", "--sweep", "r_sub", "--seeds", "1,2", "--out", "sw"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // r_sub of 16 exceeds the bank width of 12.
    let t = read_csv(&dir.path().join("sw/sweep_r_sub.csv"));
    let values: Vec<&str> = t.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(values, ["1", "4", "8"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("r_sub = 16"));
}

#[test]
fn bank_cka_is_square_with_unit_diagonal() {
    let dir = setup();
    let o = cilmp(&["bank", "cka", "--config", "c.json", "--class", "0", "--out", "k"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_csv(&dir.path().join("k/cka_class_0.csv"));
    assert_eq!(t.header.len(), 4);
    assert_eq!(t.rows.len(), 4);
    for i in 0..4 {
        assert_eq!(t.rows[i][i], "1.000000");
    }
    assert_eq!(String::from_utf8_lossy(&o.stdout), std::fs::read_to_string(dir.path().join("k/cka_class_0.csv")).unwrap());
}

#[test]
fn bank_generate_then_inspect() {
    let dir = setup();
    let o = cilmp(&["bank", "generate", "--config", "c.json", "--out", "b"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let o = cilmp(&["bank", "inspect", "--bank", "b/bank.bin"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["classes"], 3);
    assert_eq!(v["seq_len"], 4);
    assert_eq!(v["width"], 12);
}

#[test]
fn pretrain_and_report_subcommands() {
    let dir = setup();
    let o = cilmp(&["pretrain", "--config", "c.json", "--out", "p"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("p/pretrain.json").exists());
    let o = cilmp(&["train", "--config", "c.json", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let o = cilmp(&["report", "t/report.json", "t/report.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let t = CsvTable::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(t.rows.len(), 2);
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = setup();
    let o = cilmp(&["train", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    std::fs::write(dir.path().join("bad.json"), r#"{"classes":1}"#).unwrap();
    let o = cilmp(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cilmp(&["train", "--config", "c.json", "--mode", "sideways"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cilmp(&["ablate", "--config", "c.json", "--seeds", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cilmp(&["eval", "--checkpoint", "missing.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numerical_abort_exits_with_code_three() {
    let dir = setup();
    let cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
    let mut cfg = cfg.as_object().unwrap().clone();
    cfg.insert("optimizer".into(), serde_json::json!({"kind": "sgd", "lr": 1e300, "momentum": 0.0}));
    std::fs::write(dir.path().join("hot.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = cilmp(&["train", "--config", "hot.json", "--out", "h"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epoch") && err.contains("step"), "{err}");
}
