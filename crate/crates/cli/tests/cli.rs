use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn hoi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hoi")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.json");
    let body = format!(
        r#"{{
  "model": {{ "d": 8, "n": 4, "layers": 1, "dec_layers": 1, "encoder_layers": 1, "ffn_hidden": 16 }},
  "train_scenes": 12,
  "eval_scenes": 6,
  "steps": 4,
  "batch": 2,
  "eval_every": 2,
  "split": {{ "kind": "unseen_combination" }}{extra}
}}"#
    );
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_metrics_summary_and_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = hoi(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out), "--plots"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = out.join("seed-3");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("step,l_total,l_hoi,l_vp,l_op,interaction_accuracy,rule_violation_rate,unseen_accuracy")
    );
    let steps: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "2", "4"]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    assert_eq!(summary["steps"], 4);
    assert!(run.join("checkpoint.json").exists());
    assert!(fs::read_to_string(run.join("loss.svg")).unwrap().starts_with("<svg"));
    assert!(out.join("manifest.json").exists());

    let ev = hoi(&["eval", "--config", s(&cfg), "--checkpoint", s(&run.join("checkpoint.json")), "--out", s(&out)]);
    assert!(ev.status.success(), "{}", stderr(&ev));
    let metrics: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
    let trained = &summary["metrics"]["interaction_accuracy"];
    assert_eq!(&metrics["interaction_accuracy"], trained);
}

#[test]
fn same_seed_gives_byte_identical_summaries() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let read = |name: &str| {
        let out = dir.path().join(name);
        let o = hoi(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("seed-7").join("summary.json")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn zero_steps_writes_only_the_initial_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = hoi(&["train", "--config", s(&cfg), "--steps", "0", "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files: Vec<String> = fs::read_dir(out.join("seed-1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files, ["summary.json"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("seed-1/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 0);
}

#[test]
fn missing_rules_file_exits_2_and_names_the_path() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), r#", "rules_path": "nowhere.rules""#);
    let o = hoi(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.rules"), "{}", stderr(&o));
}

#[test]
fn bad_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let unknown = tiny_config(dir.path(), r#", "stepz": 1"#);
    assert_eq!(hoi(&["train", "--config", s(&unknown)]).status.code(), Some(2));
    let lvp = tiny_config(dir.path(), r#", "ablation": { "tra": true, "lrl": false, "lvp": true }"#);
    assert_eq!(hoi(&["train", "--config", s(&lvp)]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    let o = hoi(&["train", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.json"));
    assert_eq!(hoi(&["gradcheck", "everything"]).status.code(), Some(2));
    assert_eq!(hoi(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn ablate_runs_every_cell_on_one_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path(), r#", "seeds": [0, 1, 2]"#);
    let out = dir.path().join("grid");
    let o = hoi(&["ablate", "--config", s(&cfg), "--steps", "2", "--out", s(&out), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("cell,tra,lrl,vp,op,seeds,interaction_accuracy_mean,interaction_accuracy_std"));
    for (row, cell) in lines[1..].iter().zip(["tra=off;lrl=off", "tra=on;lrl=off", "tra=off;lrl=on", "tra=on;lrl=on"]) {
        assert!(row.starts_with(cell), "{row}");
        assert_eq!(row.split(',').nth(5), Some("3"));
    }
    let mut summaries = 0;
    for cell in fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()) {
        assert!(cell.join("stats.json").exists());
        for seed in 0..3 {
            let p = cell.join(format!("seed-{seed}/summary.json"));
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
            assert_eq!(v["seed"], seed);
            summaries += 1;
        }
    }
    assert_eq!(summaries, 12);
    // One manifest serves every cell.
    assert!(out.join("manifest.json").exists());
}

#[test]
fn gradcheck_reports_and_passes() {
    let o = hoi(&["gradcheck", "logic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("logic: PASS"), "{text}");
}

#[test]
fn rules_check_accepts_the_desk_rules_and_rejects_garbage() {
    let rules = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.rules");
    let o = hoi(&["rules", "check", rules]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 rules"));

    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.rules");
    fs::write(&bad, "action ride @ sideways => forbid (human,ride,horse)\n").unwrap();
    let o = hoi(&["rules", "check", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
    let o = hoi(&["rules", "check", s(&dir.path().join("none.rules"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("none.rules"));
}

#[test]
fn shipped_configs_parse() {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    for name in ["desk.json", "ablation.json"] {
        let dir = TempDir::new().unwrap();
        let path = format!("{root}/{name}");
        let o = hoi(&["train", "--config", &path, "--steps", "0", "--out", s(dir.path())]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}
