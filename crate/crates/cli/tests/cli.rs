use std::path::Path;
use std::process::{Command, Output};

use ghm_cwap::trainer::{EvalMetrics, MetricsLog, Model};
use ghm_cwap::LabeledDataset;

const BIN: &str = env!("CARGO_BIN_EXE_ghm-cwap");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("GHM_CWAP_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const TWO_CLASS: &str = r#"
seeds = [0, 1]

[dataset]
source = "synth"
class_count = 2
max_class_size = 1000
imbalance_factor = 100.0
test_class_size = 200

[train]
epochs = 3

[train.loss]
kind = "ghm-cwap"

[boundary]
x_min = -4.0
x_max = 4.0
y_min = -4.0
y_max = 4.0
nx = 9
ny = 5
"#;

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_writes_expected_rows_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TWO_CLASS);
    let a = run(&["synth", "-c", &cfg, "--out", "a"], tmp.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&["synth", "-c", &cfg, "--out", "b"], tmp.path());
    assert!(b.status.success());

    let train = std::fs::read_to_string(tmp.path().join("a/train.csv")).unwrap();
    assert_eq!(train.lines().next(), Some("f0,f1,label"));
    assert_eq!(train.lines().count(), 1 + 1010);
    for file in ["train.csv", "test.csv", "sizes.json"] {
        let x = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let y = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    let sizes: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("a/sizes.json")).unwrap()).unwrap();
    assert_eq!(sizes["class_sizes"], serde_json::json!([1000, 10]));
    assert_eq!(sizes["groups"], serde_json::json!(["Many", "Rare"]));

    let loaded = LabeledDataset::load_csv(&tmp.path().join("a/train.csv"), Some(2)).unwrap();
    assert_eq!(loaded.class_sizes(), &[1000, 10]);
}

#[test]
fn synth_balanced_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TWO_CLASS);
    let o = run(&["synth", "-c", &cfg, "--out", "bal", "--imbalance-factor", "1"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let sizes: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("bal/sizes.json")).unwrap()).unwrap();
    assert_eq!(sizes["class_sizes"], serde_json::json!([1000, 1000]));
}

#[test]
fn train_emits_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TWO_CLASS);
    let o = run(&["train", "-c", &cfg, "--out", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    assert!(out.join("config.toml").exists());

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let header = summary.lines().next().unwrap();
    assert!(header.contains("overall"), "{header}");
    assert_eq!(summary.lines().count(), 3);

    for seed in [0, 1] {
        let dir = out.join(format!("seed-{seed}"));
        let file = std::fs::File::open(dir.join("metrics.jsonl")).unwrap();
        let log = MetricsLog::read_jsonl(std::io::BufReader::new(file)).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert!(log.epochs.iter().all(|r| r.effective_sizes.as_ref().map(Vec::len) == Some(2)));
        let model: Model = serde_json::from_slice(&std::fs::read(dir.join("model.json")).unwrap()).unwrap();
        assert_eq!(model.class_count(), 2);
        let boundary = std::fs::read_to_string(dir.join("boundary.csv")).unwrap();
        assert_eq!(boundary.lines().count(), 1 + 9 * 5);
    }

    // The echoed config reproduces the run.
    let o = run(&["train", "-c", "out/config.toml", "--out", "again"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("seed-1/metrics.jsonl")).unwrap(),
        std::fs::read(tmp.path().join("again/seed-1/metrics.jsonl")).unwrap()
    );
}

#[test]
fn softmax_summary_on_balanced_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TWO_CLASS);
    let o = run(
        &["train", "-c", &cfg, "--loss", "softmax", "--imbalance-factor", "1", "--seeds", "3"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(tmp.path().join("runs/exp/summary.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "overall").unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "softmax");
    let acc: f64 = rows[0][col].parse().unwrap();
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "envtest.toml", TWO_CLASS);
    let o = Command::new(BIN)
        .args(["train", "-c", &cfg, "--epochs", "1", "--seeds", "0"])
        .current_dir(tmp.path())
        .env("GHM_CWAP_OUT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("root/envtest/seed-0/metrics.jsonl").exists());
}

#[test]
fn eval_reproduces_training_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TWO_CLASS);
    assert!(run(&["synth", "-c", &cfg, "--out", "data"], tmp.path()).status.success());
    assert!(run(&["train", "-c", &cfg, "--out", "out", "--seeds", "0"], tmp.path()).status.success());
    let o = run(
        &[
            "eval",
            "--model",
            "out/seed-0/model.json",
            "--data",
            "data/test.csv",
            "--sizes",
            "data/sizes.json",
            "--boundary",
            "grid.csv",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: EvalMetrics = serde_json::from_slice(&o.stdout).unwrap();
    let log = MetricsLog::read_jsonl(std::io::BufReader::new(
        std::fs::File::open(tmp.path().join("out/seed-0/metrics.jsonl")).unwrap(),
    ))
    .unwrap();
    assert_eq!(&metrics, log.final_eval().unwrap());
    assert!(tmp.path().join("grid.csv").exists());
}

#[test]
fn compare_ablation_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TWO_CLASS);
    let o = run(&["compare", "-c", &cfg, "--ablation", "--out", "cmp"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["softmax", "R", "A^URA", "R+A^URA", "R+A^AURA"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout), table);
    assert!(tmp.path().join("cmp/4-r-a-aura/seed-1/metrics.jsonl").exists());
}

#[test]
fn compare_identical_configs_and_mismatched_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "a.toml", TWO_CLASS);
    let same = write_config(tmp.path(), "b.toml", TWO_CLASS);
    let o = run(&["compare", "-c", &cfg, "--with", &same, "--out", "cmp"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);

    let other = write_config(tmp.path(), "c.toml", &TWO_CLASS.replace("100.0", "50.0"));
    let o = run(&["compare", "-c", &cfg, "--with", &other], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different dataset"), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown flag: usage error.
    assert_eq!(run(&["train", "--bogus"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));

    // Malformed config names the offending field.
    let bad = write_config(tmp.path(), "bad.toml", &format!("{TWO_CLASS}\n[model]\nkind = \"mlp\"\nhiden = 3\n"));
    let o = run(&["train", "-c", &bad], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model"), "{}", stderr(&o));

    // Missing config file: runtime failure naming the path.
    let o = run(&["train", "-c", "nowhere.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.toml"));

    // Missing dataset file named in the config.
    let csv_cfg = write_config(
        tmp.path(),
        "csv.toml",
        "[dataset]\nsource = \"csv\"\npath = \"missing.csv\"\n",
    );
    let o = run(&["train", "-c", &csv_cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.csv"), "{}", stderr(&o));

    // Divergence is a runtime failure.
    let o = run(&["train", "-c", &write_config(tmp.path(), "e.toml", TWO_CLASS), "--lr", "1e308"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn csv_source_with_subsampling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "exp.toml", TWO_CLASS);
    assert!(run(&["synth", "-c", &cfg, "--out", "data", "--imbalance-factor", "1"], tmp.path()).status.success());
    let csv_cfg = write_config(
        tmp.path(),
        "csv.toml",
        "[dataset]\nsource = \"csv\"\npath = \"data/train.csv\"\ntest_path = \"data/test.csv\"\nimbalance_factor = 100.0\n[train]\nepochs = 2\n",
    );
    let o = run(&["train", "-c", &csv_cfg, "--out", "csvrun"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let sizes: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("csvrun/seed-0/sizes.json")).unwrap()).unwrap();
    assert_eq!(sizes["class_sizes"], serde_json::json!([1000, 10]));
}
