//! End-to-end runs of the `lgcap` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lgcap_core::model::ModelConfig;
use lgcap_core::trainer::TrainConfig;
use serde_json::Value;

const MICRO: &str = "\
# small enough for a test
image_size = 16
patch_size = 8
width = 16
heads = 2
encoder_layers = 1
decoder_layers = 1
text_layers = 1
mlp_ratio = 2
max_len = 24
embed_dim = 8
epochs_per_task = 3
batch_size = 4
peak_lr = 3e-3
eval_max_tokens = 12
";

fn lgcap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgcap")).args(args).current_dir(cwd).env_remove("LGCAP_DATA_ROOT").output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "status {:?}\nstdout:\n{}\nstderr:\n{}", o.status, String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("micro.cfg"), MICRO).unwrap();
        ok(&lgcap(&["split", "--mode", "synthetic", "--tasks", "3", "--per-task", "16", "--seed", "7", "--out", "m.json"], dir.path()));
        Self { dir }
    }
    fn path(&self) -> &Path {
        self.dir.path()
    }
    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--manifest", "m.json", "--config", "micro.cfg", "--out", out];
        args.extend_from_slice(extra);
        lgcap(&args, self.path())
    }
    fn json(&self, rel: impl AsRef<Path>) -> Value {
        serde_json::from_slice(&std::fs::read(self.path().join(rel)).unwrap()).unwrap()
    }
    fn log(&self, run: &str) -> Vec<Value> {
        std::fs::read_to_string(self.path().join(run).join("log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

#[test]
fn split_prints_counts_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&lgcap(&["split", "--mode", "synthetic", "--tasks", "3", "--per-task", "64", "--seed", "7", "--out", "m.json"], dir.path()));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4, "{out}");
    assert!(lines[..3].iter().all(|l| l.ends_with(" 48/8/8")), "{out}");
    let m: Value = serde_json::from_slice(&std::fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["tasks"].as_array().unwrap().len(), 3);
    assert_eq!(m["digest"].as_str().unwrap().len(), 64);
}

#[test]
fn ratt_without_annotations_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lgcap(&["split", "--mode", "ratt", "--out", "m.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--annotations"));
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = lgcap(&["train", "--manifest", "nope.json", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

#[test]
fn config_problems_are_listed_before_training() {
    let s = Setup::new();
    let o = s.train("bad", &["--set", "batch_size=0", "--set", "epochs_per_task=0"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("batch_size") && err.contains("epochs_per_task"), "{err}");
    assert!(!s.path().join("bad").join("log.jsonl").exists());
    let o = s.train("bad", &["--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    for (k, v) in v.as_object().unwrap() {
        match (k.as_str(), v) {
            ("loss", _) => flatten("", v, out),
            ("weights", _) => flatten("weight_", v, out),
            ("freeze", _) => flatten("freeze_", v, out),
            ("vocab_size", _) => {}
            _ => out.push(format!("{prefix}{k}")),
        }
    }
}

#[test]
fn train_help_documents_every_config_field() {
    let help = ok(&lgcap(&["train", "--help"], Path::new(".")));
    let mut keys = Vec::new();
    flatten("", &serde_json::to_value(TrainConfig::default()).unwrap(), &mut keys);
    flatten("", &serde_json::to_value(ModelConfig::reference(10)).unwrap(), &mut keys);
    assert!(keys.len() > 30, "{keys:?}");
    for k in keys.iter().chain(&["model_seed".to_string()]) {
        assert!(help.lines().any(|l| l.trim_start().starts_with(&format!("{k} "))), "`{k}` missing from train --help");
    }
}

#[test]
fn full_pipeline() {
    let s = Setup::new();
    let out = ok(&s.train("full", &["--seed", "3", "--report", "forgetting_table"]));
    assert!(out.contains("results"), "{out}");
    let results = s.json("full/results.json");
    let runs = results["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for (t, run) in runs.iter().enumerate() {
        assert_eq!(run["task_trained"], t);
        assert_eq!(run["scores"].as_object().unwrap().len(), t + 1);
        assert!(run["scores"]["0"]["clip_score"].is_number());
    }
    for t in 0..3 {
        assert!(s.path().join(format!("full/checkpoint_task{t}.lgck")).exists());
    }
    assert!(s.path().join("full/report.txt").exists() && s.path().join("full/report.csv").exists());
    let log = s.log("full");
    assert_eq!(log.len(), 3 * 3 * 3);
    for r in &log {
        let epoch = r["epoch"].as_u64().unwrap();
        assert_eq!(r["nouns"].is_null(), epoch > 2, "{r}");
        assert_eq!(r["clip"].is_null(), epoch <= 2, "{r}");
        if r["task"] == 0 {
            assert!(r["lgcl"].is_null());
        }
    }

    // Baseline: caption loss only.
    ok(&s.train("base", &["--seed", "3", "--no-lgcl"]));
    for r in s.log("base") {
        assert!(r["nouns"].is_null() && r["clip"].is_null() && r["lgcl"].is_null(), "{r}");
        assert_eq!(r["ce"], r["total"]);
    }

    // Forgetting table over both methods, plus the chart.
    let text = ok(&lgcap(
        &["forgetting", "--results", "base/results.json", "--results", "full/results.json", "--style", "ratt_table", "--out", "cmp", "--svg", "f.svg"],
        s.path(),
    ));
    assert!(text.contains("no_lgcl") && text.contains("lgcap"), "{text}");
    assert_eq!(std::fs::read_to_string(s.path().join("cmp.txt")).unwrap(), text);
    assert!(std::fs::read_to_string(s.path().join("f.svg")).unwrap().starts_with("<svg"));
    let again = ok(&lgcap(&["forgetting", "--results", "base/results.json", "--results", "full/results.json", "--style", "ratt_table"], s.path()));
    assert_eq!(again, text);

    // Single-image generation.
    let png = s.path().join("img.png");
    image::RgbImage::from_fn(20, 20, |x, y| image::Rgb([(x * 12) as u8, (y * 12) as u8, 90])).save(&png).unwrap();
    let gen = ["generate", "--checkpoint", "full/checkpoint_task2.lgck", "--image", "img.png", "--deterministic", "--json", "g.json"];
    let cap1 = ok(&lgcap(&gen, s.path()));
    let cap2 = ok(&lgcap(&gen, s.path()));
    assert_eq!(cap1, cap2);
    let g = s.json("g.json");
    assert_eq!(format!("{}\n", g["caption"].as_str().unwrap()), cap1);
    assert!(g["tokens"].as_array().unwrap().len() <= 23);
    assert!(g["nll"].as_f64().unwrap().is_finite());
    let o = lgcap(&["generate", "--checkpoint", "full/checkpoint_task2.lgck", "--image", "img.png", "--temperature", "0"], s.path());
    assert_eq!(o.status.code(), Some(2));

    // Eval of a predictions file.
    let m = s.json("m.json");
    let preds: Vec<Value> = m["tasks"][1]["test"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| serde_json::json!({"image_id": e["image_id"], "caption": e["captions"][0]}))
        .collect();
    std::fs::write(s.path().join("p.json"), serde_json::to_vec(&preds).unwrap()).unwrap();
    let scores: Value = serde_json::from_str(&ok(&lgcap(&["eval", "--pred", "p.json", "--manifest", "m.json", "--task", "1"], s.path()))).unwrap();
    for k in ["bleu1", "bleu4", "rougeL"] {
        assert!((scores[k].as_f64().unwrap() - 100.0).abs() < 1e-6, "{k}: {scores}");
    }
    assert!(scores["meteor_lite"].as_f64().unwrap() > 99.0, "{scores}");
    assert!(scores["clip_score"].is_null());
    let with_clip: Value = serde_json::from_str(&ok(&lgcap(
        &["eval", "--pred", "p.json", "--manifest", "m.json", "--task", "1", "--checkpoint", "full/checkpoint_task2.lgck"],
        s.path(),
    )))
    .unwrap();
    assert!(with_clip["clip_score"].as_f64().unwrap() >= 0.0);
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let s = Setup::new();
    ok(&s.train("a", &["--seed", "5", "--workers", "2"]));
    // Keep only what existed after the first task, as if interrupted.
    let b: PathBuf = s.path().join("b");
    copy_dir(&s.path().join("a"), &b);
    for t in 1..3 {
        std::fs::remove_file(b.join(format!("checkpoint_task{t}.lgck"))).unwrap();
    }
    std::fs::remove_file(b.join("results.json")).unwrap();
    ok(&s.train("b", &["--resume", "b/checkpoint_task0.lgck"]));
    for f in ["results.json", "log.jsonl", "checkpoint_task1.lgck", "checkpoint_task2.lgck"] {
        assert_eq!(std::fs::read(s.path().join("a").join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}
