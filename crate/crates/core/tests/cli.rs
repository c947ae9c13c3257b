use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_mecformer");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MECFORMER_RUN_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

const ONE_TASK: &str = r#"{
  "tasks": {"tasks": [{"name": "lymph", "categories": [
    {"name": "normal", "term": "normal tissue"},
    {"name": "tumor", "term": "metastatic tumor"}]}]},
  "d_f": 8, "signal_fraction": 0.5, "noise_std": 0.3, "bags_per_class": 5,
  "min_patches": 4, "max_patches": 8, "seed": 3
}"#;

const TWO_TASK: &str = r#"{
  "tasks": {"tasks": [
    {"name": "lymph", "categories": [
      {"name": "normal", "term": "normal tissue"},
      {"name": "tumor", "term": "metastatic tumor"}]},
    {"name": "breast", "categories": [
      {"name": "idc", "term": "invasive ductal carcinoma"},
      {"name": "ilc", "term": "invasive lobular carcinoma"}]}]},
  "d_f": 8, "signal_fraction": 0.5, "noise_std": 0.3, "bags_per_class": 4,
  "min_patches": 4, "max_patches": 8, "seed": 5
}"#;

const SMALL: &[&str] = &["--d-model", "16", "--heads", "2", "--layers", "1", "--pwff-hidden", "32", "--landmarks", "4"];

fn dataset(root: &Path, name: &str, spec: &str) -> PathBuf {
    let spec_path = root.join(format!("{name}.json"));
    std::fs::write(&spec_path, spec).unwrap();
    ok(run(root, &["gen-data", "--spec", spec_path.to_str().unwrap(), "--out", name]));
    root.join(name).join("manifest.jsonl")
}

fn train(root: &Path, manifest: &Path, run_dir: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--manifest", manifest.to_str().unwrap(), "--run-dir", run_dir];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(run(root, &args))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_requested_bags_deterministically() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "a", ONE_TASK);
    let rows = std::fs::read_to_string(&manifest).unwrap().lines().count();
    assert_eq!(rows, 10);
    dataset(t.path(), "b", ONE_TASK);
    assert_eq!(read_dir_bytes(&t.path().join("a")), read_dir_bytes(&t.path().join("b")));
    assert!(t.path().join("a/tasks.json").exists());
}

#[test]
fn gen_data_refuses_non_empty_dir_without_force() {
    let t = tempfile::tempdir().unwrap();
    dataset(t.path(), "d", ONE_TASK);
    let spec = t.path().join("d.json");
    let again = run(t.path(), &["gen-data", "--spec", spec.to_str().unwrap(), "--out", "d"]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));
    ok(run(t.path(), &["gen-data", "--spec", spec.to_str().unwrap(), "--out", "d", "--force"]));
}

#[test]
fn default_spec_has_eighteen_word_vocabulary() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(run(t.path(), &["gen-data", "--out", "five", "--bags-per-class", "3"]));
    assert!(out.contains("vocabulary size 18"), "{out}");
    assert!(out.contains("tasks 5, categories 11"), "{out}");
}

#[test]
fn one_epoch_smoke_run_writes_loadable_checkpoint_per_projection() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", TWO_TASK);
    for kind in ["p1", "pt", "ecn"] {
        let dir = format!("run-{kind}");
        train(t.path(), &manifest, &dir, &["--epochs", "1", "--projection", kind]);
        let snapshot: Value =
            serde_json::from_str(&std::fs::read_to_string(t.path().join(&dir).join("config.json")).unwrap()).unwrap();
        assert_eq!(snapshot["model"]["projection"], kind);
        let ckpt = t.path().join(&dir).join("checkpoints/epoch-001.ckpt");
        let loaded = mecformer::model::read_checkpoint(&ckpt).unwrap();
        assert_eq!(loaded.config.projection.as_str(), kind);
        loaded.into_model().unwrap();
        let eval = run(
            t.path(),
            &["eval", "--checkpoint", &dir, "--manifest", manifest.to_str().unwrap()],
        );
        ok(eval);
    }
}

#[test]
fn paper_hyperparameters_are_accepted() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", ONE_TASK);
    let out = ok(run(
        t.path(),
        &[
            "train", "--manifest", manifest.to_str().unwrap(), "--run-dir", "paper", "--epochs", "1",
            "--lr", "1e-5", "--gamma", "5", "--beta", "5", "--d-model", "512", "--heads", "8", "--layers", "2",
        ],
    ));
    assert!(out.contains("best epoch 1"), "{out}");
    let snapshot = std::fs::read_to_string(t.path().join("paper/config.json")).unwrap();
    let v: Value = serde_json::from_str(&snapshot).unwrap();
    assert_eq!(v["model"]["d_model"], 512);
    assert_eq!(v["model"]["encoder_layers"], 2);
    assert_eq!(v["train"]["lr"], 1e-5);
}

#[test]
fn validation_lists_every_problem_before_work() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", ONE_TASK);
    let o = run(
        t.path(),
        &[
            "train", "--manifest", manifest.to_str().unwrap(), "--run-dir", "bad", "--lr", "0", "--d-model", "10",
            "--heads", "3", "--patience", "0",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("lr"), "{err}");
    assert!(err.contains("patience"), "{err}");
    assert!(err.contains("heads"), "{err}");
    assert!(!t.path().join("bad").exists());

    let missing = run(t.path(), &["train", "--run-dir", "bad"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("manifest is required"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("c.json"), r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#).unwrap();
    let o = run(t.path(), &["train", "--config", "c.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn flags_override_file_and_snapshot_replays_identically() {
    let t = tempfile::tempdir().unwrap();
    dataset(t.path(), "d", TWO_TASK);
    std::fs::write(
        t.path().join("c.json"),
        r#"{"manifest": "d/manifest.jsonl", "run_dir": "first",
            "model": {"d_model": 16, "heads": 2, "encoder_layers": 1, "decoder_layers": 1, "pwff_hidden": 32},
            "train": {"epochs": 5, "lr": 0.002, "seed": 4}}"#,
    )
    .unwrap();
    ok(run(t.path(), &["train", "--config", "c.json", "--epochs", "2"]));
    let snap_path = t.path().join("first/config.json");
    let snap: Value = serde_json::from_str(&std::fs::read_to_string(&snap_path).unwrap()).unwrap();
    assert_eq!(snap["train"]["epochs"], 2);
    assert_eq!(snap["train"]["lr"], 0.002);
    assert_eq!(snap["train"]["patience"], 5);

    ok(run(t.path(), &["train", "--config", snap_path.to_str().unwrap(), "--run-dir", "second"]));
    for f in ["metrics.jsonl", "checkpoints/epoch-001.ckpt", "checkpoints/epoch-002.ckpt", "val_metrics.json"] {
        assert_eq!(
            std::fs::read(t.path().join("first").join(f)).unwrap(),
            std::fs::read(t.path().join("second").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn run_root_env_sets_default_run_dir() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", ONE_TASK);
    let mut args = vec!["train", "--manifest", manifest.to_str().unwrap(), "--epochs", "1", "--seed", "9"];
    args.extend_from_slice(SMALL);
    let o = Command::new(BIN)
        .args(&args)
        .current_dir(t.path())
        .env("MECFORMER_RUN_ROOT", t.path().join("elsewhere"))
        .output()
        .unwrap();
    ok(o);
    assert!(t.path().join("elsewhere/train-ecn-seed9/best").exists());
}

#[test]
fn eval_reports_overfit_accuracy_and_consistent_formats() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", ONE_TASK);
    let m = manifest.to_str().unwrap();
    train(t.path(), &manifest, "fit", &["--epochs", "60", "--patience", "60", "--lr", "1e-2"]);
    let out = ok(run(
        t.path(),
        &["eval", "--checkpoint", "fit/checkpoints/epoch-060.ckpt", "--manifest", m, "--split", "train", "--json", "r.json"],
    ));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("r.json")).unwrap()).unwrap();
    let task = &report["tasks"][0];
    assert_eq!(task["accuracy"], 100.0, "{out}");
    let row: Vec<&str> = out.lines().nth(2).unwrap().split_whitespace().collect();
    for (i, key) in [(1, "accuracy"), (2, "f1"), (3, "recall"), (4, "precision")] {
        assert_eq!(row[i], format!("{:.4}", task[key].as_f64().unwrap()), "{out}");
    }
}

#[test]
fn eval_lists_ood_terms_verbatim() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", TWO_TASK);
    train(t.path(), &manifest, "raw", &["--epochs", "1", "--lr", "1e-6"]);
    let out = ok(run(
        t.path(),
        &["eval", "--checkpoint", "raw", "--manifest", manifest.to_str().unwrap(), "--json", "r.json", "--predictions", "p.jsonl"],
    ));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("r.json")).unwrap()).unwrap();
    let mut seen = 0;
    for task in report["tasks"].as_array().unwrap() {
        for term in task["ood_terms"].as_array().unwrap() {
            assert!(out.contains(&format!("{:?}", term.as_str().unwrap())), "{out}");
            seen += 1;
        }
    }
    assert!(seen > 0, "an untrained model should produce invalid terms\n{out}");
    let preds = std::fs::read_to_string(t.path().join("p.jsonl")).unwrap();
    let total: u64 = report["tasks"].as_array().unwrap().iter().map(|t| t["records"].as_u64().unwrap()).sum();
    assert_eq!(preds.lines().count() as u64, total);
}

#[test]
fn eval_rejects_incompatible_data() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", ONE_TASK);
    train(t.path(), &manifest, "r", &["--epochs", "1"]);
    let wide = ONE_TASK.replace("\"d_f\": 8", "\"d_f\": 5");
    let other = dataset(t.path(), "wide", &wide);
    let o = run(t.path(), &["eval", "--checkpoint", "r", "--manifest", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("d_f"));

    let two = dataset(t.path(), "two", TWO_TASK);
    let spec = t.path().join("two/tasks.json");
    let o = run(
        t.path(),
        &["eval", "--checkpoint", "r", "--manifest", two.to_str().unwrap(), "--task-spec", spec.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn decode_is_deterministic_and_validates_task() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", TWO_TASK);
    train(t.path(), &manifest, "r", &["--epochs", "3", "--lr", "5e-3"]);
    let bag = std::fs::read_dir(t.path().join("d/bags")).unwrap().next().unwrap().unwrap().path();
    let bag = bag.to_str().unwrap();
    let first = ok(run(t.path(), &["decode", "--checkpoint", "r", "--bag", bag, "--task", "breast"]));
    let second = ok(run(t.path(), &["decode", "--checkpoint", "r", "--bag", bag, "--task", "1"]));
    assert_eq!(first, second);
    let term = first.lines().next().unwrap().trim_start_matches("term: ");
    let words = term.split_whitespace().count();
    let steps = first.lines().filter(|l| l.starts_with("step ")).count();
    if first.contains("truncated: false") {
        assert_eq!(steps, words + 1, "{first}");
    } else {
        assert_eq!(steps, words, "{first}");
    }

    let missing = run(t.path(), &["decode", "--checkpoint", "r", "--bag", bag]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("--task"));
    let out_of_range = run(t.path(), &["decode", "--checkpoint", "r", "--bag", bag, "--task", "2"]);
    assert_eq!(out_of_range.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_rule() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(run(t.path(), &["gradcheck", "--size", "tiny"]));
    assert!(out.contains("PASS"));
    for group in ["ecn.experts", "ecn.common", "encoder.attn", "decoder.cross_attn", "decoder.classifier"] {
        let line = out.lines().find(|l| l.contains(group)).unwrap_or_else(|| panic!("{group} missing\n{out}"));
        assert!(line.contains("e-"), "{line}");
    }
    let bad = run(t.path(), &["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = stdout(&bad);
    assert!(text.lines().any(|l| l.contains("FAIL") && l.contains("softmax")), "{text}");
    assert!(text.contains("corrupted op: softmax"));
}

#[test]
fn ablate_grids_report_every_cell() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(t.path(), "d", TWO_TASK);
    let m = manifest.to_str().unwrap();
    let mut base = vec!["ablate", "--manifest", m, "--epochs", "1", "--lr", "5e-3"];
    base.extend_from_slice(SMALL);

    let mut proj = base.clone();
    proj.extend(["--grid", "projection", "--seeds", "3", "--run-dir", "proj"]);
    let out = ok(run(t.path(), &proj));
    for cell in ["p1 ", "pt ", "ecn "] {
        assert!(out.lines().any(|l| l.starts_with(cell) && l.contains("seeds ok 3/3")), "{out}");
    }
    assert!(out.contains("±"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("proj/report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 3);
    assert_eq!(report["splits"].as_array().unwrap().len(), 3);

    let mut dec = base;
    dec.extend(["--grid", "decoder", "--seeds", "2", "--run-dir", "dec"]);
    let out = ok(run(t.path(), &dec));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("dec/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["cells"].as_array().unwrap().iter().map(|c| c["cell"]["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["ecn", "ecn-headonly"], "{out}");
}
