//! End-to-end runs of the `matrix` binary against the scripted backend:
//! generate a synthetic corpus, train, evaluate, report.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn matrix(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matrix"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Scripted-provider config over a generated corpus, written into `dir`.
fn write_synthetic_setup(dir: &Path, epochs: u64) -> std::path::PathBuf {
    let gen = matrix(
        &[
            "gen-synthetic",
            "--families",
            "2",
            "--per-family",
            "5",
            "--seed",
            "11",
            "--out",
            "corpus.json",
            "--rulebook",
            "rules.json",
        ],
        dir,
    );
    assert!(gen.status.success(), "gen-synthetic: {}", stderr(&gen));
    assert!(stdout(&gen).contains("wrote 10 tasks"));

    let config = format!(
        r#"
[data]
manifest = "corpus.json"

[split]
seed = 11
train_size = 5
valid_only = false

[train]
epochs = {epochs}
batch_size = 3
seed = 11
eval_each_epoch = true
workers = 2

[agent]
max_turns = 5
interpreter = ["python3"]

[models]
assistant_model = "scripted"
reflector_model = "scripted"
optimizer_model = "scripted"
judge_model = "scripted"

[provider]
kind = "scripted"
rulebook = "rules.json"

[costs.scripted]
prompt_price_per_1k = "0"
completion_price_per_1k = "0"

[output]
run_dir = "run"
"#
    );
    let path = dir.join("config.toml");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn train_eval_report_pipeline_runs_offline() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_setup(dir.path(), 3);

    let train = matrix(&["train", "--config", "config.toml"], dir.path());
    assert!(train.status.success(), "train: {}", stderr(&train));
    let out = stdout(&train);
    assert!(out.contains("initial memory | test success 0.00%"), "{out}");
    let epoch_lines: Vec<&str> = out.lines().filter(|l| l.starts_with("epoch ")).collect();
    assert_eq!(epoch_lines.len(), 3, "{out}");
    assert!(out.contains("test success 100.00%"), "{out}");
    assert!(out.contains("final memory: epoch 3"), "{out}");

    let run = dir.path().join("run");
    assert!(run.join("run_config.json").exists());
    for epoch in 0..=3 {
        assert!(run.join(format!("memory/epoch_{epoch}.json")).exists());
        assert!(run.join(format!("reports/epoch_{epoch}.json")).exists());
    }

    // Rerunning is a no-op resume that succeeds without corrupting artifacts.
    let before = fs::read(run.join("memory/epoch_3.json")).unwrap();
    let again = matrix(&["train", "--config", "config.toml"], dir.path());
    assert!(again.status.success(), "resume: {}", stderr(&again));
    assert_eq!(before, fs::read(run.join("memory/epoch_3.json")).unwrap());

    // Trained memory beats the empty memory on the same split.
    let eval_trained = matrix(
        &[
            "eval",
            "--config",
            "config.toml",
            "--memory",
            "run/memory/epoch_3.json",
        ],
        dir.path(),
    );
    assert!(eval_trained.status.success(), "{}", stderr(&eval_trained));
    let trained_out = stdout(&eval_trained);
    assert!(
        trained_out.contains("success rate: 100.00%"),
        "{trained_out}"
    );

    let eval_empty = matrix(
        &[
            "eval",
            "--config",
            "config.toml",
            "--memory",
            "run/memory/epoch_0.json",
        ],
        dir.path(),
    );
    assert!(eval_empty.status.success(), "{}", stderr(&eval_empty));
    assert!(stdout(&eval_empty).contains("success rate: 0.00%"));

    // The printed rate matches the persisted report JSON.
    let report_json: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run.join("eval_matrix_epoch_3/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report_json["success_rate"], serde_json::json!(1.0));
    assert_eq!(report_json["n_tasks"], serde_json::json!(5));

    // Baseline over the same split: empty-memory agent solves nothing.
    let baseline = matrix(
        &["baseline", "--config", "config.toml", "--method", "vanilla"],
        dir.path(),
    );
    assert!(baseline.status.success(), "{}", stderr(&baseline));
    assert!(stdout(&baseline).contains("success rate: 0.00%"));
    assert!(run.join("eval_vanilla/baselines/vanilla.jsonl").exists());

    // Report: one CSV row per epoch report, histograms for epoch 0 and 3.
    let report = matrix(&["report", "--run-dir", "run"], dir.path());
    assert!(report.status.success(), "{}", stderr(&report));
    let timeseries = fs::read_to_string(run.join("report/timeseries.csv")).unwrap();
    assert_eq!(timeseries.lines().count(), 1 + 4, "{timeseries}");
    let last = timeseries.lines().last().unwrap();
    assert!(last.starts_with("3,1,"), "{timeseries}");
    assert!(run.join("report/histogram_epoch_0.csv").exists());
    assert!(run.join("report/histogram_epoch_3.csv").exists());
}

#[test]
fn epochs_zero_persists_only_the_initial_memory() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_setup(dir.path(), 0);
    let train = matrix(&["train", "--config", "config.toml"], dir.path());
    assert!(train.status.success(), "{}", stderr(&train));
    let run = dir.path().join("run");
    assert!(run.join("memory/epoch_0.json").exists());
    assert!(!run.join("memory/epoch_1.json").exists());
}

#[test]
fn live_provider_without_key_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_setup(dir.path(), 1);
    let config = fs::read_to_string(dir.path().join("config.toml"))
        .unwrap()
        .replace(
            "kind = \"scripted\"\nrulebook = \"rules.json\"",
            "kind = \"openai-compatible\"\nbase_url = \"http://127.0.0.1:1/v1\"\napi_key_env = \"MATRIX_CLI_TEST_UNSET_KEY\"",
        );
    fs::write(dir.path().join("config.toml"), config).unwrap();

    let train = matrix(&["train", "--config", "config.toml"], dir.path());
    assert!(!train.status.success());
    assert!(stderr(&train).contains("MATRIX_CLI_TEST_UNSET_KEY"));
    assert!(
        !dir.path().join("run").exists(),
        "no artifacts before validation passes"
    );
}

#[test]
fn preset_requires_exactly_one_config_source() {
    let dir = tempfile::tempdir().unwrap();
    let neither = matrix(&["train"], dir.path());
    assert!(!neither.status.success());
    assert!(stderr(&neither).contains("exactly one of --config <file> or --preset <name>"));

    let unknown = matrix(&["train", "--preset", "nope"], dir.path());
    assert!(!unknown.status.success());
    assert!(stderr(&unknown).contains("paper-full"));
}

#[test]
fn eval_matrix_without_memory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_setup(dir.path(), 1);
    let eval = matrix(&["eval", "--config", "config.toml"], dir.path());
    assert!(!eval.status.success());
    assert!(stderr(&eval).contains("--memory"));
}
