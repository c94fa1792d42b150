//! Two-agent runtime: an assistant model proposes reasoning and code, an
//! executor proxy runs the code in a sandbox and feeds results back. The
//! loop ends when the assistant emits the `FINAL ANSWER:` marker or hits the
//! turn cap, and yields a [`Trajectory`] — the unit everything downstream
//! (evaluation, reflection, optimization) consumes.

pub mod sandbox;

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize::truncate_to_tokens;
use crate::corpus::TaskInstance;
use crate::gateway::scripted::role_header;
use crate::gateway::{ChatBackend, ChatMessage, DecodingParams, UsageRecord};
use sandbox::SandboxLimits;

/// Line prefix that terminates a task and carries the answer.
pub const FINAL_ANSWER_MARKER: &str = "FINAL ANSWER:";

/// Observation injected when an assistant turn produced neither code nor an
/// answer, so the conversation keeps alternating.
pub const NO_ACTION_OBSERVATION: &str = "The last reply contained neither a fenced code block \
nor a final answer line. Reply with a fenced code block to run against invoice.xml, or give \
the final answer line.";

/// The agent's long-term memory: an ordered list of distilled insight
/// strings, versioned by training epoch. Empty memory (epoch 0) is the
/// vanilla agent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    pub epoch: u64,
    pub entries: Vec<String>,
    /// Epoch each entry was first distilled in; parallel to `entries`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Vec<u64>>,
}

impl Memory {
    pub fn empty() -> Memory {
        Memory::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    AssistantAction,
    ExecutorObservation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub kind: StepKind,
    pub content: String,
    /// Zero for executor steps.
    pub usage: UsageRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryOutcome {
    Answered,
    TurnCapReached,
    Error,
}

impl fmt::Display for TrajectoryOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TrajectoryOutcome::Answered => "answered",
            TrajectoryOutcome::TurnCapReached => "turn_cap_reached",
            TrajectoryOutcome::Error => "error",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub message: String,
    /// True when the backend reported the prompt exceeded the model context.
    #[serde(default)]
    pub context_length: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<Step>,
    pub final_answer: Option<String>,
    pub total_usage: UsageRecord,
    pub outcome: TrajectoryOutcome,
    pub memory_epoch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TrajectoryError>,
}

impl Trajectory {
    pub fn assistant_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps
            .iter()
            .filter(|s| s.kind == StepKind::AssistantAction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Maximum assistant turns per task.
    pub max_turns: usize,
    /// Heuristic-token cap on the document excerpt inlined into the prompt.
    pub inline_document_cap: usize,
    pub sandbox: SandboxLimits,
    /// Interpreter argv; the script file path is appended.
    pub interpreter: Vec<String>,
    pub decoding: DecodingParams,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_turns: 5,
            inline_document_cap: 20_000,
            sandbox: SandboxLimits::default(),
            interpreter: vec!["python3".to_string()],
            decoding: DecodingParams::default(),
        }
    }
}

/// Render the assistant's system prompt: role instructions, prior-experience
/// insights (only when memory is non-empty — with empty memory the prompt is
/// byte-identical to the vanilla agent's), the query, and document access
/// via both an inline excerpt and the sandbox file.
pub fn render_system_prompt(memory: &Memory, task: &TaskInstance, config: &AgentConfig) -> String {
    let (excerpt, truncated) =
        truncate_to_tokens(&task.document.xml_text, config.inline_document_cap);

    let mut prompt = String::new();
    prompt.push_str(&role_header("assistant"));
    prompt.push('\n');
    prompt.push_str(
        "You are a document-extraction assistant paired with a script executor.\n\
         Work out where the requested value lives in the document, then return it.\n\
         \n\
         How to act:\n\
         - To run code, reply with one or more fenced code blocks (triple backticks). The \
         executor runs each block from the task working directory with the configured \
         interpreter and replies with the combined output.\n\
         - The working directory contains the full document as the file `invoice.xml`.\n\
         - Once you know the answer, reply with a single line starting exactly with \
         `FINAL ANSWER: ` followed by the value.\n",
    );
    if !memory.entries.is_empty() {
        prompt.push_str("\nInsights from prior experience:\n");
        for entry in &memory.entries {
            prompt.push_str("- ");
            prompt.push_str(entry);
            prompt.push('\n');
        }
    }
    prompt.push_str("\nQuery: ");
    prompt.push_str(&task.query);
    prompt.push('\n');
    if truncated {
        prompt.push_str(&format!(
            "\nDocument (excerpt truncated to {} tokens; read invoice.xml for the full text):\n",
            config.inline_document_cap
        ));
    } else {
        prompt.push_str("\nDocument:\n");
    }
    prompt.push_str("<document>\n");
    prompt.push_str(excerpt);
    prompt.push_str("\n</document>\n");
    prompt
}

/// Fenced code blocks (triple backticks, optional language tag) in document
/// order. An unterminated fence is ignored with a warning.
pub fn extract_code_blocks(message: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in message.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match current.take() {
                Some(lines) => blocks.push(lines.join("\n")),
                None => current = Some(Vec::new()),
            }
        } else if let Some(lines) = current.as_mut() {
            lines.push(line);
        }
    }
    if current.is_some() {
        tracing::warn!("unterminated code fence; block ignored");
    }
    blocks
}

/// Answer after the LAST `FINAL ANSWER:` marker line in one message, trimmed.
pub fn final_answer_in(message: &str) -> Option<String> {
    let mut answer = None;
    for line in message.lines() {
        if let Some(rest) = line.trim_start().strip_prefix(FINAL_ANSWER_MARKER) {
            answer = Some(rest.trim().to_string());
        }
    }
    answer
}

/// Answer after the LAST `FINAL ANSWER:` marker line across assistant steps,
/// trimmed. Marker lines in executor output do not count.
pub fn extract_final_answer(trajectory: &Trajectory) -> Option<String> {
    trajectory
        .assistant_steps()
        .filter_map(|step| final_answer_in(&step.content))
        .last()
}

fn contains_final_answer(message: &str) -> bool {
    message
        .lines()
        .any(|line| line.trim_start().starts_with(FINAL_ANSWER_MARKER))
}

/// Run one task with the given memory. See
/// [`run_task_with_system_prompt`] for the loop itself.
pub fn run_task(
    task: &TaskInstance,
    memory: &Memory,
    backend: &dyn ChatBackend,
    model: &str,
    config: &AgentConfig,
) -> Trajectory {
    let system = render_system_prompt(memory, task, config);
    run_task_with_system_prompt(task, system, memory.epoch, backend, model, config)
}

/// The conversation loop, with the system prompt supplied by the caller (the
/// retry-with-reflections baseline appends its own section to the standard
/// prompt).
///
/// Per turn: ask the assistant; a `FINAL ANSWER:` line ends the task; else
/// every fenced code block is executed in order in a per-task workdir holding
/// `invoice.xml`, and the combined output becomes the next observation. Steps
/// alternate assistant/executor, never ending on an executor step. Backend
/// failures end the trajectory with outcome `error`, keeping completed steps.
pub fn run_task_with_system_prompt(
    task: &TaskInstance,
    system_prompt: String,
    memory_epoch: u64,
    backend: &dyn ChatBackend,
    model: &str,
    config: &AgentConfig,
) -> Trajectory {
    let mut trajectory = Trajectory {
        task_id: task.id.clone(),
        steps: Vec::new(),
        final_answer: None,
        total_usage: UsageRecord::default(),
        outcome: TrajectoryOutcome::Error,
        memory_epoch,
        error: None,
    };

    let workdir = match tempfile::tempdir() {
        Ok(dir) => dir,
        Err(e) => {
            trajectory.error = Some(TrajectoryError {
                message: format!("cannot create sandbox workdir: {e}"),
                context_length: false,
            });
            return trajectory;
        }
    };
    if let Err(e) = fs::write(workdir.path().join("invoice.xml"), &task.document.xml_text) {
        trajectory.error = Some(TrajectoryError {
            message: format!("cannot write invoice.xml: {e}"),
            context_length: false,
        });
        return trajectory;
    }

    let mut messages = vec![ChatMessage::system(system_prompt)];
    for turn in 0..config.max_turns {
        let response = match backend.complete(&messages, model, &config.decoding) {
            Ok(response) => response,
            Err(e) => {
                trajectory.error = Some(TrajectoryError {
                    message: e.to_string(),
                    context_length: e.is_context_length(),
                });
                trajectory.outcome = TrajectoryOutcome::Error;
                // Keep the alternation invariant: never end on an observation.
                if trajectory
                    .steps
                    .last()
                    .is_some_and(|s| s.kind == StepKind::ExecutorObservation)
                {
                    trajectory.steps.pop();
                }
                return finalize(trajectory);
            }
        };

        push_step(
            &mut trajectory,
            StepKind::AssistantAction,
            response.content.clone(),
            response.usage,
        );
        messages.push(ChatMessage::assistant(response.content.clone()));

        if contains_final_answer(&response.content) {
            trajectory.outcome = TrajectoryOutcome::Answered;
            return finalize(trajectory);
        }
        if turn + 1 == config.max_turns {
            trajectory.outcome = TrajectoryOutcome::TurnCapReached;
            return finalize(trajectory);
        }

        let blocks = extract_code_blocks(&response.content);
        let observation = if blocks.is_empty() {
            NO_ACTION_OBSERVATION.to_string()
        } else {
            let mut parts = Vec::with_capacity(blocks.len());
            for (i, block) in blocks.iter().enumerate() {
                match sandbox::execute_script(
                    block,
                    workdir.path(),
                    &config.interpreter,
                    &config.sandbox,
                ) {
                    Ok(result) => parts.push(format!(
                        "[block {} — {}]\n{}",
                        i + 1,
                        result.status,
                        result.combined_output
                    )),
                    Err(e) => {
                        trajectory.error = Some(TrajectoryError {
                            message: e.to_string(),
                            context_length: false,
                        });
                        trajectory.outcome = TrajectoryOutcome::Error;
                        return finalize(trajectory);
                    }
                }
            }
            parts.join("\n")
        };
        push_step(
            &mut trajectory,
            StepKind::ExecutorObservation,
            observation.clone(),
            UsageRecord::default(),
        );
        messages.push(ChatMessage::user(observation));
    }

    // Unreachable: the loop always returns on marker, cap, or error.
    finalize(trajectory)
}

fn push_step(trajectory: &mut Trajectory, kind: StepKind, content: String, usage: UsageRecord) {
    trajectory.steps.push(Step {
        index: trajectory.steps.len(),
        kind,
        content,
        usage,
    });
}

fn finalize(mut trajectory: Trajectory) -> Trajectory {
    trajectory.total_usage = trajectory
        .steps
        .iter()
        .fold(UsageRecord::default(), |acc, s| acc.plus(&s.usage));
    trajectory.final_answer = extract_final_answer(&trajectory);
    trajectory
}

#[derive(Serialize, Deserialize)]
struct TrajectorySummary {
    task_id: String,
    outcome: TrajectoryOutcome,
    final_answer: Option<String>,
    total_usage: UsageRecord,
    memory_epoch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<TrajectoryError>,
    steps: usize,
}

/// File stem for a task id (ids may contain path separators).
pub fn task_file_stem(task_id: &str) -> String {
    task_id
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect()
}

/// Persist a trajectory under `dir`: steps as `{id}.jsonl` (one step per
/// line) plus `{id}.summary.json`.
pub fn save_trajectory(dir: &Path, trajectory: &Trajectory) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let stem = task_file_stem(&trajectory.task_id);
    let mut lines = String::new();
    for step in &trajectory.steps {
        lines.push_str(&serde_json::to_string(step).map_err(io::Error::other)?);
        lines.push('\n');
    }
    fs::write(dir.join(format!("{stem}.jsonl")), lines)?;
    let summary = TrajectorySummary {
        task_id: trajectory.task_id.clone(),
        outcome: trajectory.outcome,
        final_answer: trajectory.final_answer.clone(),
        total_usage: trajectory.total_usage,
        memory_epoch: trajectory.memory_epoch,
        error: trajectory.error.clone(),
        steps: trajectory.steps.len(),
    };
    fs::write(
        dir.join(format!("{stem}.summary.json")),
        serde_json::to_string_pretty(&summary).map_err(io::Error::other)?,
    )
}

/// Load a trajectory persisted by [`save_trajectory`].
pub fn load_trajectory(dir: &Path, task_id: &str) -> io::Result<Trajectory> {
    let stem = task_file_stem(task_id);
    let summary: TrajectorySummary = serde_json::from_str(&fs::read_to_string(
        dir.join(format!("{stem}.summary.json")),
    )?)
    .map_err(io::Error::other)?;
    let mut steps = Vec::new();
    for line in fs::read_to_string(dir.join(format!("{stem}.jsonl")))?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        steps.push(serde_json::from_str(line).map_err(io::Error::other)?);
    }
    if steps.len() != summary.steps {
        return Err(io::Error::other(format!(
            "trajectory {task_id}: {} steps on disk, summary says {}",
            steps.len(),
            summary.steps
        )));
    }
    Ok(Trajectory {
        task_id: summary.task_id,
        steps,
        final_answer: summary.final_answer,
        total_usage: summary.total_usage,
        outcome: summary.outcome,
        memory_epoch: summary.memory_epoch,
        error: summary.error,
    })
}
