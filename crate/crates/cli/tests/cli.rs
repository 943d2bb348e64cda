use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "seed": 3,
  "dataset": {"generate": {"classes": 4, "per_class": 12, "dim": 6, "separation": 4.0, "noise": 0.5}},
  "source": {"dims": [6, 16, 8], "epochs": 3, "batch_size": 8, "optim": {"lr": 0.001}},
  "transfer": {
    "mode": "self", "target_dims": [6, 16, 8], "epochs": 3, "batch_size": 8,
    "optim": {"lr": 0.001}, "augment": {"noise_std": 0.1, "views": 2}
  },
  "eval": {"k_values": [1, 2], "pair_ranking_top": 3}
}"#;

fn exf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exf")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Setup {
    dir: TempDir,
}

impl Setup {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("cfg.json"), config).unwrap();
        Self { dir }
    }

    fn cfg(&self) -> String {
        self.dir.path().join("cfg.json").display().to_string()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> Output {
        let out = self.out(out).display().to_string();
        let mut args = vec![cmd, "--config", self.cfg().leak(), "--out", out.leak()];
        args.extend_from_slice(extra);
        exf(&args)
    }
}

fn path(p: &Path) -> &'static str {
    p.display().to_string().leak()
}

fn with_transfer(edit: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(SMALL).unwrap();
    edit(&mut v["transfer"]);
    v.to_string()
}

#[test]
fn train_source_writes_loadable_artifacts() {
    let s = Setup::new(SMALL);
    let o = s.run("train-source", "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("R@1"));
    for f in ["source.ckpt", "source_log.jsonl", "source_report.json", "train.csv", "test.csv"] {
        assert!(s.out("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(s.out("run").join("source_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(!log.contains("wall_time"));
    let ckpt = exf_cli::checkpoint::Checkpoint::load(&s.out("run").join("source.ckpt")).unwrap();
    assert_eq!(ckpt.model.layer_dims(), &[6, 16, 8]);
}

#[test]
fn reruns_are_byte_identical_and_seed_matters() {
    let s = Setup::new(SMALL);
    for out in ["a", "b"] {
        assert_eq!(code(&s.run("train-source", out, &[])), 0);
    }
    assert_eq!(code(&s.run("train-source", "c", &["--seed", "4"])), 0);
    let read = |d: &str| fs::read(s.out(d).join("source.ckpt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn nondeterministic_mode_logs_wall_time() {
    let s = Setup::new(SMALL);
    assert_eq!(code(&s.run("train-source", "run", &["--deterministic", "false"])), 0);
    assert!(fs::read_to_string(s.out("run").join("source_log.jsonl")).unwrap().contains("wall_time_s"));
}

#[test]
fn missing_dataset_file_is_a_config_error() {
    let cfg = SMALL.replace(
        r#""generate": {"classes": 4, "per_class": 12, "dim": 6, "separation": 4.0, "noise": 0.5}"#,
        r#""load": {"path": "/nonexistent/features.csv"}"#,
    );
    let s = Setup::new(&cfg);
    let o = s.run("train-source", "run", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/nonexistent/features.csv"), "{}", stderr(&o));
    assert!(!s.out("run").exists());
}

#[test]
fn schema_violations_fail_before_writing() {
    let s = Setup::new(&SMALL.replacen("\"seed\": 3,", "\"seed\": 3, \"sede\": 4,", 1));
    let o = s.run("train-source", "run", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));
    assert!(!s.out("run").exists());
    let s = Setup::new(&with_transfer(|t| t["loss"] = "triplet".into()));
    assert_eq!(code(&s.run("train-source", "run", &[])), 1);
}

#[test]
fn transfer_reports_source_and_target_side_by_side() {
    let s = Setup::new(SMALL);
    assert_eq!(code(&s.run("train-source", "run", &[])), 0);
    let o = s.run("transfer", "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("source") && text.contains("target") && text.contains("top pairs"));
    let report: Value = serde_json::from_str(&fs::read_to_string(s.out("run").join("report.json")).unwrap()).unwrap();
    for who in ["source", "target"] {
        for split in ["train", "test"] {
            assert_eq!(report[who][split]["recall"].as_array().unwrap().len(), 2);
        }
        assert!(report[who]["rho"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(report["pairs"]["ranking"]["top"].as_array().unwrap().len(), 3);
    assert!(report.get("ablation").is_none());
    let log = fs::read_to_string(s.out("run").join("target_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("test_recall_at_1")));
}

#[test]
fn ablation_is_labeled() {
    let s = Setup::new(&with_transfer(|t| t["loss"] = "unrelaxed_relative".into()));
    assert_eq!(code(&s.run("train-source", "run", &[])), 0);
    let o = s.run("transfer", "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("ablation"));
    let report: Value = serde_json::from_str(&fs::read_to_string(s.out("run").join("report.json")).unwrap()).unwrap();
    assert_eq!(report["loss"], "unrelaxed_relative");
    assert!(report["ablation"].is_string());
}

#[test]
fn sigma_sweep_gives_one_row_per_value() {
    let sigmas = [0.25, 0.5, 1.0, 2.0, 4.0];
    let s = Setup::new(&with_transfer(|t| t["sweep"] = serde_json::json!({"sigma": sigmas})));
    assert_eq!(code(&s.run("train-source", "run", &[])), 0);
    let o = s.run("transfer", "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(s.out("run").join("report.json")).unwrap()).unwrap();
    let rows = report["sweep"].as_array().unwrap();
    let got: Vec<f64> = rows.iter().map(|r| r["sigma"].as_f64().unwrap()).collect();
    assert_eq!(got, sigmas);
}

#[test]
fn transfer_without_source_or_with_wrong_dims_fails() {
    let s = Setup::new(SMALL);
    let o = s.run("transfer", "run", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("source.ckpt"));
    assert_eq!(code(&s.run("train-source", "run", &[])), 0);
    let mut v: Value = serde_json::from_str(SMALL).unwrap();
    v["source"]["dims"] = serde_json::json!([6, 12, 8]);
    v["transfer"]["target_dims"] = serde_json::json!([6, 12, 8]);
    let other = Setup::new(&v.to_string());
    let src = s.out("run").join("source.ckpt");
    let o = other.run("transfer", "x", &["--source", path(&src)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("dims"));
}

#[test]
fn eval_prints_identical_json() {
    let s = Setup::new(SMALL);
    assert_eq!(code(&s.run("train-source", "run", &[])), 0);
    let ckpt = path(&s.out("run").join("source.ckpt"));
    let train = path(&s.out("run").join("train.csv"));
    let a = exf(&["eval", "--checkpoint", ckpt, "--dataset", train, "--k", "1,2,4"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = exf(&["eval", "--checkpoint", ckpt, "--dataset", train, "--k", "1,2,4"]);
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    for r in v["retrieval"]["recall"].as_array().unwrap() {
        assert!((0.0..=1.0).contains(&r.as_f64().unwrap()));
    }
    assert!(v["spectral"]["rho"].as_f64().is_some());
    let big = exf(&["eval", "--checkpoint", ckpt, "--dataset", train, "--k", "1,500"]);
    assert_eq!(code(&big), 1);
    assert!(stderr(&big).contains("K = 500"), "{}", stderr(&big));
    let missing = exf(&["eval", "--checkpoint", "/nonexistent.ckpt", "--dataset", train]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let ok = exf(&["gradcheck", "--trials", "10"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    let text = stdout(&ok);
    assert!(text.contains("relaxed_ms(alpha=1,beta=4)"));
    assert!(text.contains("mlp_backward"));
    let bad = exf(&["gradcheck", "--trials", "10", "--corrupt", "relaxed_contrastive"]);
    assert_eq!(code(&bad), 3);
    assert!(stderr(&bad).contains("relaxed_contrastive") && stderr(&bad).contains("seed"), "{}", stderr(&bad));
    assert_eq!(code(&exf(&["gradcheck", "--trials", "0"])), 1);
}

#[test]
fn schema_command_prints_json_schema() {
    let o = exf(&["schema"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["properties"]["transfer"].is_object());
    let shipped = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/schema.json")).unwrap();
    assert_eq!(shipped.trim_end(), stdout(&o).trim_end(), "configs/schema.json is stale; regenerate with `exf schema`");
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap() == "schema.json" {
            continue;
        }
        let cfg = exf_cli::config::ExperimentConfig::load(&p).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert!(cfg.transfer.is_some());
        n += 1;
    }
    assert_eq!(n, 6);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_exf")).arg("schema").env("EXF_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 1);
}
