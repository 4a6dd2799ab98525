use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "corpus": {"n_speakers": 6, "utterances_per_speaker": 8, "dim": 8},
  "n_heldout": 2,
  "model": {"hidden": 16, "latent": 8, "branch_hidden": 8},
  "train": {"epochs": 3},
  "trials": {"n_nontarget_per_target": 2, "probe": {"epochs": 20, "lr": 0.02}}
}"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        Self::with_config(SMALL)
    }

    fn with_config(json: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, json).unwrap();
        Run { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    fn aan(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_aan"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out-dir")
            .arg(self.out())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.aan(args);
        assert!(
            out.status.success(),
            "aan {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&bytes(path)).unwrap()
}

#[test]
fn gen_data_creates_missing_dir_and_is_deterministic() {
    let run = Run::new();
    assert!(!run.out().exists());
    let first = run.ok(&["gen-data"]);
    let train = bytes(&run.file("train.csv"));
    let second = run.ok(&["gen-data"]);
    assert_eq!(first, second);
    assert_eq!(train, bytes(&run.file("train.csv")));
    let m = manifest(&run.file("gen-data.manifest.json"));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn seed_flag_changes_the_corpus() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let a = bytes(&run.file("train.csv"));
    run.ok(&["--seed", "5", "gen-data"]);
    assert_ne!(a, bytes(&run.file("train.csv")));
}

#[test]
fn invalid_spec_fails_and_names_the_field() {
    let run = Run::with_config(r#"{"corpus": {"n_speakers": 0}}"#);
    let out = run.aan(&["gen-data"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_speakers"), "{err}");
}

#[test]
fn lambda_flag_overrides_config_and_history_has_one_row_per_epoch() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    run.ok(&["train", "--lambda", "0.5"]);
    let m = manifest(&run.file("train.manifest.json"));
    assert_eq!(m["config"]["train"]["lambda"], 0.5);
    let history = String::from_utf8(bytes(&run.file("history.csv"))).unwrap();
    let mut lines = history.lines();
    let header = lines.next().unwrap();
    for col in [
        "l_au",
        "l_gender",
        "l_accent",
        "l_speaker",
        "valid_acc_speaker",
    ] {
        assert!(header.contains(col), "{header}");
    }
    assert_eq!(lines.count(), 3 + 1);
}

#[test]
fn retraining_gives_identical_checkpoint() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    run.ok(&["train"]);
    let a = bytes(&run.file("model.aan"));
    run.ok(&["train"]);
    assert_eq!(a, bytes(&run.file("model.aan")));
    assert_eq!(&a[..4], b"AAN1");
}

#[test]
fn identity_anonymization_copies_the_file() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let input = run.file("test.csv");
    let output = run.file("anon/test_identity.csv");
    run.ok(&[
        "anonymize",
        "--method",
        "identity",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(bytes(&input), bytes(&output));
    let m = manifest(&run.file("anon/test_identity.csv.manifest.json"));
    assert_eq!(m["details"]["method"], "identity");
}

#[test]
fn aan2_requires_model_and_pool() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    run.ok(&["train"]);
    let input = run.file("test.csv");
    let model = run.file("model.aan");
    let pool = run.file("train.csv");
    let output = run.file("test_aan2.csv");
    let base = [
        "anonymize",
        "--method",
        "aan2",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ];
    let mut only_model = base.to_vec();
    only_model.extend(["--model", model.to_str().unwrap()]);
    let out = run.aan(&only_model);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pool"));
    assert!(!output.exists());

    let mut full = only_model.clone();
    full.extend(["--pool", pool.to_str().unwrap()]);
    run.ok(&full);
    let rows = |p: &Path| String::from_utf8(bytes(p)).unwrap().lines().count();
    assert_eq!(rows(&output), rows(&input));
    assert_ne!(bytes(&output), bytes(&input));
}

#[test]
fn unknown_method_is_rejected() {
    let run = Run::new();
    let out = run.aan(&[
        "anonymize",
        "--method",
        "aan3",
        "--input",
        "a.csv",
        "--output",
        "b.csv",
    ]);
    assert!(!out.status.success());
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    String::from_utf8(bytes(path))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn evaluate_reports_every_condition_and_report_prints_it() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    run.ok(&["train"]);
    let text = run.ok(&["evaluate"]);
    assert!(text.contains("aan1"));
    let rows = csv_rows(&run.file("report.csv"));
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let conditions: std::collections::BTreeSet<String> = rows[1..]
        .iter()
        .map(|r| format!("{}-{}", r[col("enroll")], r[col("trial")]))
        .collect();
    assert_eq!(
        conditions.into_iter().collect::<Vec<_>>(),
        ["a-a", "o-a", "o-o"]
    );
    for r in &rows[1..] {
        let cllr: f64 = r[col("cllr")].parse().unwrap();
        let min: f64 = r[col("min_cllr")].parse().unwrap();
        assert!(cllr >= min, "{r:?}");
    }
    assert_eq!(run.ok(&["report"]), text);
}

#[test]
fn sweep_writes_one_report_per_lambda() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let summary = run.ok(&["sweep-lambda", "--lambdas", "0,8"]);
    assert_eq!(summary.lines().count(), 3);
    for tag in ["0", "8"] {
        assert!(run.file(&format!("report_lambda{tag}.csv")).exists());
        assert!(run.file(&format!("model_lambda{tag}.aan")).exists());
    }
    assert!(!run.file("report_lambda1.csv").exists());
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let run = Run::new();
    let a = run.ok(&["gradcheck"]);
    assert_eq!(a, run.ok(&["gradcheck"]));
    let max: f64 = a
        .lines()
        .find(|l| l.starts_with("max"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(max < 1e-4);
}

#[test]
fn gradcheck_with_zero_threshold_fails() {
    let run = Run::new();
    let out = run.aan(&["gradcheck", "--threshold", "0"]);
    assert_eq!(out.status.code(), Some(1));
}
