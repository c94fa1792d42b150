//! The five commands behind the `matrix` binary. Each returns an exit code;
//! all diagnostics go through anyhow so `main` can print one error line and
//! exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use anyhow::{bail, Context, Result};

use matrix_core::agent::{save_trajectory, Memory};
use matrix_core::baselines::{run_baseline, save_baseline_results, BaselineMethod, BaselineResult};
use matrix_core::corpus::synthetic::{generate_synthetic_corpus, FAMILY_NAMES};
use matrix_core::corpus::{load_manifest, split, write_manifest, Dataset};
use matrix_core::evaluator::{
    aggregate, match_answer, save_report, EvalReport, HistogramBin, TaskResult,
    DEFAULT_HISTOGRAM_BIN_WIDTH,
};
use matrix_core::gateway::scripted::{synthetic_rulebook, ScriptFlavor};
use matrix_core::gateway::{ChatBackend, RoleModelConfig};
use matrix_core::trainer::prompts::PromptTemplates;
use matrix_core::trainer::{
    evaluate_memory, load_epoch_report, train, EpochReport, ReflectionVerdict, TrainInputs,
};

use crate::config::RunConfig;

/// What `eval` runs over the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    /// The agent with a trained memory file.
    Matrix,
    Baseline(BaselineMethod),
}

const INTERRUPTED_EXIT: u8 = 130;

fn load_split(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dataset = load_manifest(&config.data.manifest)
        .with_context(|| format!("cannot load manifest {}", config.data.manifest.display()))?;
    let (train_set, test_set) = split(&dataset, &config.split.spec)?;
    if let Some(expected) = config.split.expected_test_size {
        if test_set.len() != expected {
            tracing::warn!(
                "split produced {} test tasks, config documents {expected}",
                test_set.len()
            );
        }
    }
    Ok((train_set, test_set))
}

/// One console line per persisted epoch report. Epoch 0 is the pre-training
/// evaluation of the empty memory, not a training epoch, so it is labelled
/// differently.
pub fn epoch_line(report: &EpochReport) -> String {
    let mut line = if report.epoch == 0 {
        "initial memory".to_string()
    } else {
        let correct = report
            .verdicts
            .iter()
            .filter(|v| v.verdict == ReflectionVerdict::Correct)
            .count();
        format!(
            "epoch {}: correct {}/{} | kept {} | memory {} entries",
            report.epoch,
            correct,
            report.verdicts.len(),
            report.kept_after_truncation,
            report.memory_entries,
        )
    };
    if let Some(rate) = report.test_success_rate {
        line.push_str(&format!(" | test success {:.2}%", rate * 100.0));
    }
    line
}

pub fn cmd_train(config: &RunConfig, interrupt: &AtomicBool) -> Result<ExitCode> {
    config.validate()?;
    let backend = config.provider.build_backend()?;
    let (train_set, test_set) = load_split(config)?;

    let run_dir = &config.output.run_dir;
    fs::create_dir_all(run_dir)?;
    let config_path = run_dir.join("run_config.json");
    if !config_path.exists() {
        fs::write(&config_path, serde_json::to_string_pretty(config)? + "\n")?;
    }

    let templates = PromptTemplates::default();
    let train_config = config.train.train_config(config.models.clone());
    let on_epoch = |report: &EpochReport| println!("{}", epoch_line(report));
    let summary = train(&TrainInputs {
        train: &train_set,
        test: &test_set,
        config: &train_config,
        agent: &config.agent,
        templates: &templates,
        cost_table: &config.costs,
        backend: backend.as_ref(),
        run_dir,
        on_epoch: Some(&on_epoch),
        interrupt: Some(interrupt),
    })?;

    let final_epoch = summary.final_memory.memory.epoch;
    println!(
        "final memory: epoch {final_epoch}, {} entries ({})",
        summary.final_memory.memory.entries.len(),
        matrix_core::trainer::memory_path(run_dir, final_epoch).display(),
    );
    if summary.interrupted {
        println!(
            "interrupted — everything through epoch {final_epoch} is persisted; rerun to resume"
        );
        return Ok(ExitCode::from(INTERRUPTED_EXIT));
    }
    Ok(ExitCode::SUCCESS)
}

fn judge_pair<'a>(
    enabled: bool,
    backend: &'a dyn ChatBackend,
    models: &'a RoleModelConfig,
) -> Option<(&'a dyn ChatBackend, &'a str)> {
    enabled.then_some((backend, models.judge_model.as_str()))
}

/// Score baseline outputs against the test split's reference answers.
fn baseline_task_results(
    set: &Dataset,
    results: &[BaselineResult],
    models: &RoleModelConfig,
    judge: Option<(&dyn ChatBackend, &str)>,
) -> Result<Vec<TaskResult>> {
    set.instances
        .iter()
        .zip(results)
        .map(|(task, result)| {
            let truth = task.answer.as_deref().with_context(|| {
                format!(
                    "test task {} has no reference answer to score against",
                    task.id
                )
            })?;
            Ok(TaskResult {
                task_id: task.id.clone(),
                usage: result.usage,
                model: models.assistant_model.clone(),
                doc_tokens: task.document.token_length,
                verdict: match_answer(result.answer.as_deref(), truth, judge),
            })
        })
        .collect()
}

pub fn cmd_eval(
    config: &RunConfig,
    method: EvalMethod,
    memory_path: Option<&Path>,
    judge: bool,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    config.validate()?;
    let backend = config.provider.build_backend()?;
    let (_, test_set) = load_split(config)?;
    let templates = PromptTemplates::default();

    let (report, out_dir) = match method {
        EvalMethod::Matrix => {
            let path = memory_path
                .context("--memory <memory-file> is required to evaluate the trained agent")?;
            let memory: Memory = serde_json::from_str(
                &fs::read_to_string(path)
                    .with_context(|| format!("cannot read memory {}", path.display()))?,
            )
            .with_context(|| format!("{} is not a memory file", path.display()))?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "memory".to_string());
            let out_dir =
                out.unwrap_or_else(|| config.output.run_dir.join(format!("eval_matrix_{stem}")));

            let train_config = config.train.train_config(config.models.clone());
            let (report, trajectories) = evaluate_memory(
                &test_set,
                &memory,
                backend.as_ref(),
                &train_config,
                &config.agent,
                &config.costs,
                judge_pair(judge, backend.as_ref(), &config.models),
            )?;
            let traj_dir = out_dir.join("trajectories");
            for trajectory in &trajectories {
                save_trajectory(&traj_dir, trajectory)?;
            }
            (report, out_dir)
        }
        EvalMethod::Baseline(method) => {
            let out_dir =
                out.unwrap_or_else(|| config.output.run_dir.join(format!("eval_{method}")));
            let results = run_baseline(
                &test_set,
                method,
                backend.as_ref(),
                &config.models,
                &config.agent,
                &templates,
                config.baseline.max_trials,
                config.train.workers,
            );
            save_baseline_results(&out_dir, method, &results)?;
            let rows = baseline_task_results(
                &test_set,
                &results,
                &config.models,
                judge_pair(judge, backend.as_ref(), &config.models),
            )?;
            let report = aggregate(&rows, &config.costs, DEFAULT_HISTOGRAM_BIN_WIDTH)?;
            (report, out_dir)
        }
    };

    fs::create_dir_all(&out_dir)?;
    save_report(&out_dir, &report)?;
    println!("evaluated {} test tasks", report.n_tasks);
    println!("success rate: {}", report.success_rate_percent());
    println!("report: {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["bin_lo", "bin_hi", "count"])?;
    for bin in bins {
        writer.write_record([
            bin.bin_lo.to_string(),
            bin.bin_hi.to_string(),
            bin.count.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Epoch reports under a run directory, ascending. Errors when there are none.
fn collect_epoch_reports(run_dir: &Path) -> Result<Vec<EpochReport>> {
    let reports_dir = run_dir.join("reports");
    let entries = fs::read_dir(&reports_dir)
        .with_context(|| format!("no epoch reports under {}", reports_dir.display()))?;
    let mut epochs: Vec<u64> = entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?
                .strip_suffix(".json")?
                .parse()
                .ok()
        })
        .collect();
    if epochs.is_empty() {
        bail!("no epoch reports under {}", reports_dir.display());
    }
    epochs.sort_unstable();
    epochs
        .into_iter()
        .map(|epoch| Ok(load_epoch_report(run_dir, epoch)?))
        .collect()
}

pub fn cmd_report(run_dir: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let reports = collect_epoch_reports(run_dir)?;
    let out_dir = out.unwrap_or_else(|| run_dir.join("report"));
    fs::create_dir_all(&out_dir)?;

    let timeseries_path = out_dir.join("timeseries.csv");
    let mut writer = csv::Writer::from_path(&timeseries_path)?;
    writer.write_record([
        "epoch",
        "success_rate",
        "avg_api_calls_solved",
        "avg_cost_solved",
    ])?;
    let fmt_opt = |v: Option<String>| v.unwrap_or_default();
    for report in &reports {
        let eval: Option<&EvalReport> = report.test_report.as_ref();
        writer.write_record([
            report.epoch.to_string(),
            fmt_opt(report.test_success_rate.map(|r| r.to_string())),
            fmt_opt(
                eval.and_then(|e| e.avg_api_calls_solved)
                    .map(|v| v.to_string()),
            ),
            fmt_opt(eval.and_then(|e| e.avg_cost_solved).map(|v| v.to_string())),
        ])?;
    }
    writer.flush()?;
    println!(
        "wrote {} rows to {}",
        reports.len(),
        timeseries_path.display()
    );

    let with_eval: Vec<&EpochReport> = reports.iter().filter(|r| r.test_report.is_some()).collect();
    match (with_eval.first(), with_eval.last()) {
        (Some(first), Some(last)) => {
            let mut paths = vec![(first.epoch, &first.test_report)];
            if last.epoch != first.epoch {
                paths.push((last.epoch, &last.test_report));
            }
            for (epoch, report) in paths {
                let histogram = &report.as_ref().expect("filtered").length_histogram;
                let path = out_dir.join(format!("histogram_epoch_{epoch}.csv"));
                write_histogram_csv(&path, histogram)?;
                println!("wrote {}", path.display());
            }
        }
        _ => tracing::warn!("no epoch report embeds a test evaluation; histograms skipped"),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_gen_synthetic(
    families: usize,
    per_family: usize,
    seed: u64,
    out: &Path,
    rulebook: Option<&Path>,
    flavor: ScriptFlavor,
) -> Result<ExitCode> {
    if !(1..=FAMILY_NAMES.len()).contains(&families) {
        bail!("--families must be in 1..={}", FAMILY_NAMES.len());
    }
    if per_family == 0 {
        bail!("--per-family must be positive");
    }
    let dataset = generate_synthetic_corpus(families, per_family, seed);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_manifest(&dataset, out)?;
    println!("wrote {} tasks to {}", dataset.len(), out.display());

    if let Some(rulebook_path) = rulebook {
        let rulebook = synthetic_rulebook(&dataset, flavor);
        if let Some(parent) = rulebook_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(
            rulebook_path,
            serde_json::to_string_pretty(&rulebook)? + "\n",
        )?;
        println!(
            "wrote scripted rulebook ({} rules, {} scripts) to {}",
            rulebook.rules.len(),
            match flavor {
                ScriptFlavor::Python => "python3",
                ScriptFlavor::Shell => "sh",
            },
            rulebook_path.display(),
        );
    }
    Ok(ExitCode::SUCCESS)
}
