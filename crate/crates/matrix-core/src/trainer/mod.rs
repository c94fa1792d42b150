//! The memory-refinement training loop.
//!
//! Per epoch: sample a minibatch from the train set, collect one trajectory
//! per task with the current memory, have the reflector judge each
//! trajectory against ground truth, truncate the batch to the optimizer's
//! context budget, and ask the optimizer model for the next memory version.
//! Every epoch's memory, trajectories, and report are persisted before the
//! next epoch starts, so a run can be resumed from its last memory file.

pub mod prompts;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_task, save_trajectory, AgentConfig, Memory, Trajectory};
use crate::corpus::tokenize::token_count;
use crate::corpus::{Dataset, TaskInstance};
use crate::evaluator::{
    aggregate, match_answer, EvalReport, TaskResult, DEFAULT_HISTOGRAM_BIN_WIDTH,
};
use crate::gateway::{
    ChatBackend, ChatMessage, CostTable, DecodingParams, GatewayError, RoleModelConfig,
};
use crate::parallel::map_indexed;
use prompts::PromptTemplates;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("prompt template error: {0}")]
    Template(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReflectionVerdict {
    Correct,
    Incorrect,
}

impl std::fmt::Display for ReflectionVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReflectionVerdict::Correct => "Correct",
            ReflectionVerdict::Incorrect => "Incorrect",
        })
    }
}

/// The reflector's judgment of one trajectory. The verdict is always the
/// deterministic matcher's — a reflector reply that disagrees with ground
/// truth is overridden — so `key_steps`/`raw` carry the model's analysis
/// while `verdict` stays sound.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reflection {
    pub task_id: String,
    pub verdict: ReflectionVerdict,
    /// Reflector's analysis of the decisive steps; empty on fallback.
    pub key_steps: String,
    /// Verbatim reflector reply; empty when the call failed.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training epochs to run; 0 persists only the initial empty memory.
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Token budget for the optimizer prompt (trajectories + reflections +
    /// template overhead).
    #[serde(default = "default_context_budget")]
    pub context_budget: usize,
    pub models: RoleModelConfig,
    /// Evaluate each new memory version on the full test set.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
    /// Memory entry cap applied after optimization.
    #[serde(default = "default_max_entries")]
    pub max_entries: usize,
    /// Bounded parallelism for trajectory collection, reflection, and eval.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_batch_size() -> usize {
    14
}
fn default_context_budget() -> usize {
    100_000
}
fn default_true() -> bool {
    true
}
fn default_max_entries() -> usize {
    40
}
fn default_workers() -> usize {
    4
}

impl TrainConfig {
    pub fn new(models: RoleModelConfig) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: default_batch_size(),
            seed: 0,
            context_budget: default_context_budget(),
            models,
            eval_each_epoch: default_true(),
            max_entries: default_max_entries(),
            workers: default_workers(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, value) in [
            ("batch_size", self.batch_size),
            ("context_budget", self.context_budget),
            ("max_entries", self.max_entries),
            ("workers", self.workers),
        ] {
            if value == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// A versioned memory with its training provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryVersion {
    #[serde(flatten)]
    pub memory: Memory,
    /// Epoch whose batch produced this version (0 for the initial memory).
    pub created_from_epoch: u64,
    /// Empty for the initial memory.
    pub optimizer_model: String,
    /// Task ids the optimizer actually saw (after truncation).
    pub source_batch_ids: Vec<String>,
}

impl MemoryVersion {
    pub fn initial() -> MemoryVersion {
        MemoryVersion {
            memory: Memory::empty(),
            created_from_epoch: 0,
            optimizer_model: String::new(),
            source_batch_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskVerdictRow {
    pub task_id: String,
    pub verdict: ReflectionVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub batch_task_ids: Vec<String>,
    pub verdicts: Vec<TaskVerdictRow>,
    /// Trajectory+reflection pairs that survived context truncation.
    pub kept_after_truncation: usize,
    pub memory_entries: usize,
    /// The optimizer reply had no parseable insight list; memory was carried
    /// forward unchanged (epoch still advanced).
    #[serde(default)]
    pub memory_carried_forward: bool,
    /// A single oversized trajectory had steps elided to fit the budget.
    #[serde(default)]
    pub oversized_item_elided: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_success_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_report: Option<EvalReport>,
}

/// Uniform minibatch without replacement, in sampling order. When `size`
/// covers the whole train set, the full set is returned in stored order and
/// the rng is untouched — every epoch then retries the same batch.
pub fn sample_minibatch(
    train: &Dataset,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TaskInstance>, TrainError> {
    assert!(size >= 1, "batch size must be positive");
    if train.instances.is_empty() {
        return Err(TrainError::Config("train set is empty".into()));
    }
    if size >= train.instances.len() {
        return Ok(train.instances.clone());
    }
    let picked = rand::seq::index::sample(rng, train.instances.len(), size);
    Ok(picked.iter().map(|i| train.instances[i].clone()).collect())
}

/// Plain-text form of a trajectory for reflector/optimizer prompts: header
/// lines (task id, outcome, final answer, any runtime error) followed by each
/// step labelled with its role.
pub fn serialize_trajectory(trajectory: &Trajectory) -> String {
    let mut out = format!(
        "Task: {}\nOutcome: {}\nFinal answer: {}\n",
        trajectory.task_id,
        trajectory.outcome,
        trajectory.final_answer.as_deref().unwrap_or("(none)"),
    );
    if let Some(error) = &trajectory.error {
        out.push_str(&format!("Runtime error: {}\n", error.message));
    }
    out.push_str("Steps:");
    for step in &trajectory.steps {
        let role = match step.kind {
            crate::agent::StepKind::AssistantAction => "assistant",
            crate::agent::StepKind::ExecutorObservation => "executor",
        };
        out.push_str(&format!(
            "\n[step {} | {role}]\n{}",
            step.index + 1,
            step.content
        ));
    }
    out
}

/// Trajectory serialization with interior steps elided: the first `head` and
/// last `tail` steps survive around an elision marker.
fn serialize_trajectory_elided(trajectory: &Trajectory, head: usize, tail: usize) -> String {
    let elided = trajectory.steps.len() - head - tail;
    let mut shortened = trajectory.clone();
    let tail_steps = trajectory.steps[trajectory.steps.len() - tail..].to_vec();
    shortened.steps.truncate(head);
    let mut text = serialize_trajectory(&shortened);
    text.push_str(&format!("\n[... {elided} steps elided ...]"));
    shortened.steps = tail_steps;
    for step in &shortened.steps {
        let role = match step.kind {
            crate::agent::StepKind::AssistantAction => "assistant",
            crate::agent::StepKind::ExecutorObservation => "executor",
        };
        text.push_str(&format!(
            "\n[step {} | {role}]\n{}",
            step.index + 1,
            step.content
        ));
    }
    text
}

pub fn serialize_reflection(reflection: &Reflection) -> String {
    format!(
        "Task: {}\nVerdict: {}\nAnalysis: {}",
        reflection.task_id,
        reflection.verdict,
        if reflection.key_steps.is_empty() {
            "(none)"
        } else {
            &reflection.key_steps
        },
    )
}

fn matcher_verdict(trajectory: &Trajectory, ground_truth: &str) -> ReflectionVerdict {
    if match_answer(trajectory.final_answer.as_deref(), ground_truth, None).matched {
        ReflectionVerdict::Correct
    } else {
        ReflectionVerdict::Incorrect
    }
}

pub(crate) fn parse_reflection_reply(content: &str) -> (Option<ReflectionVerdict>, String) {
    let verdict = content.lines().find_map(|line| {
        let value = line.trim_start().strip_prefix("Verdict:")?.trim();
        let value = value.trim_end_matches(['.', '!']).trim();
        if value.eq_ignore_ascii_case("correct") {
            Some(ReflectionVerdict::Correct)
        } else if value.eq_ignore_ascii_case("incorrect") {
            Some(ReflectionVerdict::Incorrect)
        } else {
            None
        }
    });
    let key_steps = content
        .find("Key steps:")
        .map(|pos| content[pos + "Key steps:".len()..].trim().to_string())
        .unwrap_or_default();
    (verdict, key_steps)
}

/// Ask the reflector to judge one trajectory against ground truth. The
/// returned verdict is always consistent with the deterministic matcher; a
/// disagreeing or unparseable reply keeps only its analysis text, and a
/// failed call degrades to the matcher verdict with empty analysis so
/// training proceeds.
pub fn reflect(
    trajectory: &Trajectory,
    ground_truth: &str,
    backend: &dyn ChatBackend,
    models: &RoleModelConfig,
    templates: &PromptTemplates,
) -> Reflection {
    let sound = matcher_verdict(trajectory, ground_truth);
    let prompt = templates.render_reflector(&serialize_trajectory(trajectory), ground_truth);
    let messages = [ChatMessage::system(prompt)];
    match backend.complete(
        &messages,
        &models.reflector_model,
        &DecodingParams::default(),
    ) {
        Ok(response) => {
            let (parsed, key_steps) = parse_reflection_reply(&response.content);
            if let Some(parsed) = parsed {
                if parsed != sound {
                    tracing::warn!(
                        task = %trajectory.task_id,
                        "reflector verdict {parsed} overridden by matcher {sound}"
                    );
                }
            }
            Reflection {
                task_id: trajectory.task_id.clone(),
                verdict: sound,
                key_steps,
                raw: response.content,
            }
        }
        Err(e) => {
            tracing::warn!(task = %trajectory.task_id, "reflector call failed: {e}");
            Reflection {
                task_id: trajectory.task_id.clone(),
                verdict: sound,
                key_steps: String::new(),
                raw: String::new(),
            }
        }
    }
}

/// Largest `n` such that `overhead + sizes[..n]` sums within `budget`.
pub fn longest_fitting_prefix(sizes: &[usize], overhead: usize, budget: usize) -> usize {
    let mut total = overhead;
    for (i, size) in sizes.iter().enumerate() {
        total = total.saturating_add(*size);
        if total > budget {
            return i;
        }
    }
    sizes.len()
}

/// What the optimizer will actually see after context truncation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptimizerInput {
    /// Ids of the kept tasks, in sampling order.
    pub task_ids: Vec<String>,
    pub trajectory_blocks: Vec<String>,
    pub reflection_blocks: Vec<String>,
    pub kept: usize,
    pub dropped: usize,
    pub oversized_elided: bool,
}

/// Keep the longest prefix of trajectory+reflection pairs (atomic pairs, in
/// sampling order) whose serialized tokens plus template overhead fit
/// `budget`. If even the first pair is too large on its own, it is kept with
/// interior trajectory steps elided (head and tail preserved) and flagged.
pub fn truncate_to_budget(
    trajectories: &[Trajectory],
    reflections: &[Reflection],
    memory: &Memory,
    templates: &PromptTemplates,
    budget: usize,
) -> OptimizerInput {
    assert!(budget > 0, "context budget must be positive");
    assert_eq!(trajectories.len(), reflections.len(), "pairs must align");

    let trajectory_blocks: Vec<String> = trajectories.iter().map(serialize_trajectory).collect();
    let reflection_blocks: Vec<String> = reflections.iter().map(serialize_reflection).collect();
    let overhead = token_count(&templates.render_optimizer(&[], &[], memory));
    let sizes: Vec<usize> = trajectory_blocks
        .iter()
        .zip(&reflection_blocks)
        .map(|(t, r)| token_count(t) + token_count(r))
        .collect();

    let kept = longest_fitting_prefix(&sizes, overhead, budget);
    if kept == 0 && !trajectories.is_empty() {
        // Single oversized pair: elide interior steps until it fits (or until
        // only the first and last step remain — the floor).
        let trajectory = &trajectories[0];
        let reflection_tokens = token_count(&reflection_blocks[0]);
        let n_steps = trajectory.steps.len();
        let mut block = trajectory_blocks[0].clone();
        for keep in (1..n_steps).rev() {
            let head = keep.div_ceil(2);
            let tail = keep - head;
            block = serialize_trajectory_elided(trajectory, head, tail);
            if overhead + token_count(&block) + reflection_tokens <= budget {
                break;
            }
        }
        return OptimizerInput {
            task_ids: vec![trajectory.task_id.clone()],
            trajectory_blocks: vec![block],
            reflection_blocks: vec![reflection_blocks[0].clone()],
            kept: 1,
            dropped: trajectories.len() - 1,
            oversized_elided: true,
        };
    }

    OptimizerInput {
        task_ids: trajectories[..kept]
            .iter()
            .map(|t| t.task_id.clone())
            .collect(),
        trajectory_blocks: trajectory_blocks[..kept].to_vec(),
        reflection_blocks: reflection_blocks[..kept].to_vec(),
        kept,
        dropped: trajectories.len() - kept,
        oversized_elided: false,
    }
}

/// Numbered-list items (`1. text` / `2) text`), in order; `None` when the
/// text has no such lines.
fn parse_numbered_list(text: &str) -> Option<Vec<String>> {
    let mut items = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            continue;
        }
        let Some(rest) = trimmed[digits..].strip_prefix(['.', ')']) else {
            continue;
        };
        let item = rest.trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
    }
    (!items.is_empty()).then_some(items)
}

/// One optimizer call: current memory + kept trajectories and reflections →
/// next memory version. The reply is parsed as a numbered insight list,
/// deduplicated exactly, and capped at `max_entries` (tail dropped). An
/// unparseable reply carries the current entries forward (epoch still
/// advances); the second return value reports that. Backend errors propagate
/// — the caller aborts the epoch.
pub fn optimize_memory(
    input: &OptimizerInput,
    current: &Memory,
    backend: &dyn ChatBackend,
    models: &RoleModelConfig,
    templates: &PromptTemplates,
    max_entries: usize,
) -> Result<(MemoryVersion, bool), GatewayError> {
    assert!(
        input.kept >= 1,
        "optimizer needs at least one kept trajectory"
    );
    let prompt =
        templates.render_optimizer(&input.trajectory_blocks, &input.reflection_blocks, current);
    let messages = [ChatMessage::system(prompt)];
    let response = backend.complete(
        &messages,
        &models.optimizer_model,
        &DecodingParams::default(),
    )?;

    let (mut entries, carried_forward) = match parse_numbered_list(&response.content) {
        Some(items) => (items, false),
        None => {
            tracing::warn!("optimizer reply had no numbered list; memory carried forward");
            (current.entries.clone(), true)
        }
    };

    let mut seen = std::collections::BTreeSet::new();
    entries.retain(|e| seen.insert(e.clone()));
    entries.truncate(max_entries);

    let new_epoch = current.epoch + 1;
    let inherited: BTreeMap<&str, u64> = current
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let born = current
                .provenance
                .as_ref()
                .and_then(|p| p.get(i).copied())
                .unwrap_or(current.epoch);
            (e.as_str(), born)
        })
        .collect();
    let provenance = entries
        .iter()
        .map(|e| inherited.get(e.as_str()).copied().unwrap_or(new_epoch))
        .collect();

    Ok((
        MemoryVersion {
            memory: Memory {
                epoch: new_epoch,
                entries,
                provenance: Some(provenance),
            },
            created_from_epoch: current.epoch,
            optimizer_model: models.optimizer_model.clone(),
            source_batch_ids: input.task_ids.clone(),
        },
        carried_forward,
    ))
}

pub fn memory_path(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join("memory").join(format!("epoch_{epoch}.json"))
}

pub fn report_path(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join("reports").join(format!("epoch_{epoch}.json"))
}

pub fn trajectories_dir(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join("trajectories").join(format!("epoch_{epoch}"))
}

pub fn save_memory_version(run_dir: &Path, version: &MemoryVersion) -> Result<(), TrainError> {
    let path = memory_path(run_dir, version.memory.epoch);
    fs::create_dir_all(path.parent().expect("memory dir"))?;
    let mut text = serde_json::to_string_pretty(version)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_memory_version(run_dir: &Path, epoch: u64) -> Result<MemoryVersion, TrainError> {
    Ok(serde_json::from_str(&fs::read_to_string(memory_path(
        run_dir, epoch,
    ))?)?)
}

pub fn save_epoch_report(run_dir: &Path, report: &EpochReport) -> Result<(), TrainError> {
    let path = report_path(run_dir, report.epoch);
    fs::create_dir_all(path.parent().expect("reports dir"))?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_epoch_report(run_dir: &Path, epoch: u64) -> Result<EpochReport, TrainError> {
    Ok(serde_json::from_str(&fs::read_to_string(report_path(
        run_dir, epoch,
    ))?)?)
}

/// Highest persisted memory epoch in a run directory, if any.
pub fn last_persisted_epoch(run_dir: &Path) -> Option<u64> {
    let entries = fs::read_dir(run_dir.join("memory")).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?
                .strip_suffix(".json")?
                .parse()
                .ok()
        })
        .max()
}

/// Run the agent with `memory` over every task in `set` and score it. Tasks
/// run with bounded parallelism; judge calls (when a judge is supplied)
/// happen serially afterwards, and their usage never enters the per-task
/// metrics. Returns the report and the raw trajectories in set order.
pub fn evaluate_memory(
    set: &Dataset,
    memory: &Memory,
    backend: &dyn ChatBackend,
    config: &TrainConfig,
    agent: &AgentConfig,
    cost_table: &CostTable,
    judge: Option<(&dyn ChatBackend, &str)>,
) -> Result<(EvalReport, Vec<Trajectory>), TrainError> {
    require_answers(set)?;
    let trajectories = map_indexed(&set.instances, config.workers, |_, task| {
        run_task(task, memory, backend, &config.models.assistant_model, agent)
    });
    let mut results = Vec::with_capacity(trajectories.len());
    for (task, trajectory) in set.instances.iter().zip(&trajectories) {
        let truth = task.answer.as_deref().expect("checked above");
        let verdict = match_answer(trajectory.final_answer.as_deref(), truth, judge);
        results.push(TaskResult {
            task_id: task.id.clone(),
            usage: trajectory.total_usage,
            model: config.models.assistant_model.clone(),
            doc_tokens: task.document.token_length,
            verdict,
        });
    }
    let report = aggregate(&results, cost_table, DEFAULT_HISTOGRAM_BIN_WIDTH)?;
    Ok((report, trajectories))
}

fn require_answers(set: &Dataset) -> Result<(), TrainError> {
    for task in &set.instances {
        if task.answer.as_deref().is_none_or(str::is_empty) {
            return Err(TrainError::Config(format!(
                "task {} in dataset {} has no ground-truth answer",
                task.id, set.name
            )));
        }
    }
    Ok(())
}

pub struct TrainInputs<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub config: &'a TrainConfig,
    pub agent: &'a AgentConfig,
    pub templates: &'a PromptTemplates,
    pub cost_table: &'a CostTable,
    pub backend: &'a dyn ChatBackend,
    pub run_dir: &'a Path,
    /// Called after each epoch's artifacts are persisted.
    pub on_epoch: Option<&'a dyn Fn(&EpochReport)>,
    /// Checked between epochs; when set, the run stops at the next epoch
    /// boundary with everything so far persisted.
    pub interrupt: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    /// Reports produced by this invocation (including the epoch-0 evaluation
    /// when it ran), in epoch order.
    pub reports: Vec<EpochReport>,
    pub final_memory: MemoryVersion,
    /// Epoch of the persisted memory this invocation resumed from.
    pub resumed_from_epoch: Option<u64>,
    pub interrupted: bool,
}

/// Run (or resume) training. Artifacts land under `run_dir`:
/// `memory/epoch_{k}.json`, `trajectories/epoch_{k}/`, `reports/epoch_{k}.json`,
/// `prompts/`, and `run_config.json` (written once). With `epochs = 0` only
/// the initial empty memory is persisted. A backend failure in the optimizer
/// aborts the epoch after its trajectories are on disk; rerunning resumes
/// from the last persisted memory version.
pub fn train(inputs: &TrainInputs) -> Result<TrainSummary, TrainError> {
    let config = inputs.config;
    let run_dir = inputs.run_dir;
    config.validate()?;
    inputs.templates.validate()?;
    require_answers(inputs.train)?;
    if config.eval_each_epoch {
        require_answers(inputs.test)?;
    }

    fs::create_dir_all(run_dir)?;
    inputs.templates.save(&run_dir.join("prompts"))?;
    let config_path = run_dir.join("run_config.json");
    if !config_path.exists() {
        let view = serde_json::json!({
            "train_config": config,
            "agent_config": inputs.agent,
            "train_set": { "name": inputs.train.name, "tasks": inputs.train.len() },
            "test_set": { "name": inputs.test.name, "tasks": inputs.test.len() },
        });
        fs::write(&config_path, serde_json::to_string_pretty(&view)? + "\n")?;
    }

    let (mut current, resumed_from_epoch) = match last_persisted_epoch(run_dir) {
        Some(epoch) => (load_memory_version(run_dir, epoch)?, Some(epoch)),
        None => {
            let initial = MemoryVersion::initial();
            save_memory_version(run_dir, &initial)?;
            (initial, None)
        }
    };

    let mut reports = Vec::new();
    if config.eval_each_epoch && current.memory.epoch == 0 && !report_path(run_dir, 0).exists() {
        let (eval, _) = evaluate_memory(
            inputs.test,
            &current.memory,
            inputs.backend,
            config,
            inputs.agent,
            inputs.cost_table,
            None,
        )?;
        let report = EpochReport {
            epoch: 0,
            batch_task_ids: Vec::new(),
            verdicts: Vec::new(),
            kept_after_truncation: 0,
            memory_entries: 0,
            memory_carried_forward: false,
            oversized_item_elided: false,
            test_success_rate: Some(eval.success_rate),
            test_report: Some(eval),
        };
        save_epoch_report(run_dir, &report)?;
        if let Some(hook) = inputs.on_epoch {
            hook(&report);
        }
        reports.push(report);
    }

    let mut interrupted = false;
    for epoch in (current.memory.epoch + 1)..=config.epochs {
        if inputs
            .interrupt
            .is_some_and(|flag| flag.load(Ordering::Relaxed))
        {
            interrupted = true;
            break;
        }

        // Per-epoch rng stream: sampling depends only on (seed, epoch), so a
        // resumed run draws the same batches a straight-through run would.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch);
        let batch = sample_minibatch(inputs.train, config.batch_size, &mut rng)?;

        let trajectories = map_indexed(&batch, config.workers, |_, task| {
            run_task(
                task,
                &current.memory,
                inputs.backend,
                &config.models.assistant_model,
                inputs.agent,
            )
        });
        let traj_dir = trajectories_dir(run_dir, epoch);
        for trajectory in &trajectories {
            save_trajectory(&traj_dir, trajectory)?;
        }

        let reflections = map_indexed(&trajectories, config.workers, |i, trajectory| {
            let truth = batch[i].answer.as_deref().expect("validated");
            reflect(
                trajectory,
                truth,
                inputs.backend,
                &config.models,
                inputs.templates,
            )
        });

        let optimizer_input = truncate_to_budget(
            &trajectories,
            &reflections,
            &current.memory,
            inputs.templates,
            config.context_budget,
        );
        let (next, carried_forward) = optimize_memory(
            &optimizer_input,
            &current.memory,
            inputs.backend,
            &config.models,
            inputs.templates,
            config.max_entries,
        )?;
        save_memory_version(run_dir, &next)?;

        let (test_success_rate, test_report) = if config.eval_each_epoch {
            let (eval, _) = evaluate_memory(
                inputs.test,
                &next.memory,
                inputs.backend,
                config,
                inputs.agent,
                inputs.cost_table,
                None,
            )?;
            (Some(eval.success_rate), Some(eval))
        } else {
            (None, None)
        };

        let report = EpochReport {
            epoch,
            batch_task_ids: batch.iter().map(|t| t.id.clone()).collect(),
            verdicts: reflections
                .iter()
                .map(|r| TaskVerdictRow {
                    task_id: r.task_id.clone(),
                    verdict: r.verdict,
                })
                .collect(),
            kept_after_truncation: optimizer_input.kept,
            memory_entries: next.memory.entries.len(),
            memory_carried_forward: carried_forward,
            oversized_item_elided: optimizer_input.oversized_elided,
            test_success_rate,
            test_report,
        };
        save_epoch_report(run_dir, &report)?;
        if let Some(hook) = inputs.on_epoch {
            hook(&report);
        }
        reports.push(report);
        current = next;
    }

    Ok(TrainSummary {
        reports,
        final_memory: current,
        resumed_from_epoch,
        interrupted,
    })
}
