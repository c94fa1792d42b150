//! Comparison systems: chain-of-thought single-prompt, the vanilla two-agent
//! system without memory, and retry-with-reflections.
//!
//! All three report through [`BaselineResult`] so the evaluator can score
//! them uniformly. Tasks are independent (parallelizable); the
//! retry-with-reflections trial loop within one task is sequential, and its
//! reflection notes are reset per task — nothing learned on one task ever
//! reaches another.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{
    final_answer_in, render_system_prompt, run_task, run_task_with_system_prompt, AgentConfig,
    Memory, Trajectory, FINAL_ANSWER_MARKER,
};
use crate::corpus::tokenize::truncate_to_tokens;
use crate::corpus::{Dataset, TaskInstance};
use crate::evaluator::match_answer;
use crate::gateway::{ChatBackend, ChatMessage, DecodingParams, RoleModelConfig, UsageRecord};
use crate::parallel::map_indexed;
use crate::trainer::prompts::PromptTemplates;
use crate::trainer::{parse_reflection_reply, serialize_trajectory, Reflection, ReflectionVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Cot,
    Vanilla,
    Reflexion,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMethod::Cot => "cot",
            BaselineMethod::Vanilla => "vanilla",
            BaselineMethod::Reflexion => "reflexion",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub task_id: String,
    pub method: BaselineMethod,
    pub answer: Option<String>,
    /// Always 1 except for retry-with-reflections.
    pub trials_used: u32,
    /// Aggregated over every trial, reflector calls included.
    pub usage: UsageRecord,
    /// One note per failed trial (retry-with-reflections only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reflections: Vec<Reflection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Single-prompt chain-of-thought baseline. The document goes into the prompt
/// inline (capped like the agent's excerpt — there is no sandbox to read the
/// full file from) and the answer is taken from the same `FINAL ANSWER:`
/// marker contract.
pub fn render_cot_prompt(task: &TaskInstance, config: &AgentConfig) -> String {
    let (excerpt, truncated) =
        truncate_to_tokens(&task.document.xml_text, config.inline_document_cap);
    let mut prompt = format!(
        "ROLE: cot\n\
         You answer one extraction query over a UBL invoice document in a single reply.\n\
         Think step by step through the document, then end with a line starting \
         `{FINAL_ANSWER_MARKER}` followed by the answer and nothing else.\n\
         \nQuery: {}\n",
        task.query
    );
    if truncated {
        prompt.push_str(&format!(
            "\nDocument (excerpt truncated to {} tokens):\n",
            config.inline_document_cap
        ));
    } else {
        prompt.push_str("\nDocument:\n");
    }
    prompt.push_str(&format!("<document>\n{excerpt}\n</document>\n"));
    prompt
}

pub fn run_cot(
    task: &TaskInstance,
    backend: &dyn ChatBackend,
    models: &RoleModelConfig,
    config: &AgentConfig,
) -> BaselineResult {
    let messages = [ChatMessage::system(render_cot_prompt(task, config))];
    match backend.complete(&messages, &models.assistant_model, &config.decoding) {
        Ok(response) => BaselineResult {
            task_id: task.id.clone(),
            method: BaselineMethod::Cot,
            answer: final_answer_in(&response.content),
            trials_used: 1,
            usage: response.usage,
            reflections: Vec::new(),
            error: None,
        },
        Err(e) => BaselineResult {
            task_id: task.id.clone(),
            method: BaselineMethod::Cot,
            answer: None,
            trials_used: 1,
            usage: UsageRecord::default(),
            reflections: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// The vanilla attempt itself: one [`run_task`] with an empty [`Memory`].
/// Exposed so the baseline can be checked step-for-step against the bare
/// agent runtime.
pub fn vanilla_trajectory(
    task: &TaskInstance,
    backend: &dyn ChatBackend,
    models: &RoleModelConfig,
    config: &AgentConfig,
) -> Trajectory {
    run_task(
        task,
        &Memory::empty(),
        backend,
        &models.assistant_model,
        config,
    )
}

/// The two-agent system with no memory: exactly [`vanilla_trajectory`],
/// result fields copied from the trajectory.
pub fn run_vanilla(
    task: &TaskInstance,
    backend: &dyn ChatBackend,
    models: &RoleModelConfig,
    config: &AgentConfig,
) -> BaselineResult {
    let trajectory = vanilla_trajectory(task, backend, models, config);
    BaselineResult {
        task_id: task.id.clone(),
        method: BaselineMethod::Vanilla,
        answer: trajectory.final_answer,
        trials_used: 1,
        usage: trajectory.total_usage,
        reflections: Vec::new(),
        error: trajectory.error.map(|e| e.message),
    }
}

/// Section appended to the agent's system prompt on retry trials. Empty when
/// there are no reflections yet, so the first trial's prompt is byte-equal to
/// the vanilla baseline's.
fn reflections_section(reflections: &[Reflection]) -> String {
    if reflections.is_empty() {
        return String::new();
    }
    let mut section = String::from("\nReflections on earlier failed attempts at this task:\n");
    for reflection in reflections {
        let note = if reflection.key_steps.is_empty() {
            &reflection.raw
        } else {
            &reflection.key_steps
        };
        section.push_str(&format!("- {note}\n"));
    }
    section
}

/// Retry-with-reflections: up to `max_trials` two-agent attempts, each failed
/// trial reviewed by the reflector model whose note joins the next trial's
/// prompt. The note store is per-task — reset on entry, never shared. Trial
/// success is the deterministic matcher against ground truth (label leakage
/// at test time is inherent to this baseline's trial-and-error design). A
/// backend failure mid-trial aborts the task with partial usage recorded.
pub fn run_reflexion(
    task: &TaskInstance,
    backend: &dyn ChatBackend,
    models: &RoleModelConfig,
    config: &AgentConfig,
    templates: &PromptTemplates,
    max_trials: u32,
) -> BaselineResult {
    assert!(max_trials >= 1, "max_trials must be positive");
    let truth = task
        .answer
        .as_deref()
        .expect("retry-with-reflections needs ground truth for its trial success signal");

    let base_prompt = render_system_prompt(&Memory::empty(), task, config);
    let mut usage = UsageRecord::default();
    let mut reflections: Vec<Reflection> = Vec::new();

    let result = |answer: Option<String>,
                  trials_used: u32,
                  usage: UsageRecord,
                  reflections: Vec<Reflection>,
                  error: Option<String>| BaselineResult {
        task_id: task.id.clone(),
        method: BaselineMethod::Reflexion,
        answer,
        trials_used,
        usage,
        reflections,
        error,
    };

    for trial in 1..=max_trials {
        let prompt = format!("{base_prompt}{}", reflections_section(&reflections));
        let trajectory =
            run_task_with_system_prompt(task, prompt, 0, backend, &models.assistant_model, config);
        usage.accumulate(&trajectory.total_usage);

        if let Some(error) = &trajectory.error {
            return result(None, trial, usage, reflections, Some(error.message.clone()));
        }
        if match_answer(trajectory.final_answer.as_deref(), truth, None).matched {
            return result(trajectory.final_answer, trial, usage, reflections, None);
        }

        let reflector_prompt = [ChatMessage::system(
            templates.render_reflector(&serialize_trajectory(&trajectory), truth),
        )];
        let response = match backend.complete(
            &reflector_prompt,
            &models.reflector_model,
            &DecodingParams::default(),
        ) {
            Ok(response) => response,
            Err(e) => {
                return result(
                    None,
                    trial,
                    usage,
                    reflections,
                    Some(format!("reflector: {e}")),
                );
            }
        };
        usage.accumulate(&response.usage);
        let (_, key_steps) = parse_reflection_reply(&response.content);
        reflections.push(Reflection {
            task_id: task.id.clone(),
            verdict: ReflectionVerdict::Incorrect,
            key_steps,
            raw: response.content,
        });
    }

    result(None, max_trials, usage, reflections, None)
}

/// Run one baseline over every task in `set` with bounded parallelism, in set
/// order. `max_trials` only applies to retry-with-reflections.
#[allow(clippy::too_many_arguments)]
pub fn run_baseline(
    set: &Dataset,
    method: BaselineMethod,
    backend: &dyn ChatBackend,
    models: &RoleModelConfig,
    config: &AgentConfig,
    templates: &PromptTemplates,
    max_trials: u32,
    workers: usize,
) -> Vec<BaselineResult> {
    map_indexed(&set.instances, workers, |_, task| match method {
        BaselineMethod::Cot => run_cot(task, backend, models, config),
        BaselineMethod::Vanilla => run_vanilla(task, backend, models, config),
        BaselineMethod::Reflexion => {
            run_reflexion(task, backend, models, config, templates, max_trials)
        }
    })
}

pub fn baseline_results_path(run_dir: &Path, method: BaselineMethod) -> PathBuf {
    run_dir.join("baselines").join(format!("{method}.jsonl"))
}

/// Persist one method's results as JSONL under `run_dir/baselines/`.
pub fn save_baseline_results(
    run_dir: &Path,
    method: BaselineMethod,
    results: &[BaselineResult],
) -> io::Result<()> {
    let path = baseline_results_path(run_dir, method);
    fs::create_dir_all(path.parent().expect("baselines dir"))?;
    let mut file = fs::File::create(path)?;
    for result in results {
        serde_json::to_writer(&mut file, result)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_baseline_results(
    run_dir: &Path,
    method: BaselineMethod,
) -> io::Result<Vec<BaselineResult>> {
    let file = fs::File::open(baseline_results_path(run_dir, method))?;
    BufReader::new(file)
        .lines()
        .map(|line| Ok(serde_json::from_str(&line?)?))
        .collect()
}
