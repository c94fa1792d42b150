//! Answer matching and metric aggregation.
//!
//! Matching is exact over normalized strings by default; an optional LLM
//! judge gets one call for pairs the exact path rejects. Aggregation turns
//! per-task results into an [`EvalReport`]: success rate, API-call and cost
//! averages over solved tasks, and a histogram of solved-document lengths.

use std::fs;
use std::io;
use std::path::Path;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::gateway::scripted::role_header;
use crate::gateway::{
    cost_of, ChatBackend, ChatMessage, CostTable, DecodingParams, GatewayError, UsageRecord,
};

/// Canonical form used for exact matching: outer whitespace trimmed, internal
/// whitespace runs collapsed to one space, one trailing period stripped, one
/// surrounding quote pair stripped, then lowercased. Internal punctuation
/// (hyphens, slashes) is preserved. Period strips before quotes so
/// `"ABC-123".` → `abc-123`.
pub fn normalize_reference(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut rest = collapsed.as_str();
    rest = rest.strip_suffix('.').unwrap_or(rest);
    for quote in ['"', '\''] {
        if rest.len() >= 2 && rest.starts_with(quote) && rest.ends_with(quote) {
            rest = &rest[1..rest.len() - 1];
            break;
        }
    }
    rest.to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    ExactNormalized,
    LlmJudge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub matched: bool,
    /// `llm_judge` only when the judge was consulted and replied legibly.
    pub mode: MatchMode,
    /// Raw judge reply, when one was obtained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_raw: Option<String>,
    /// Set when a judge was enabled but its call failed or its reply did not
    /// start with YES/NO; `matched` then reflects the exact path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
}

impl MatchVerdict {
    fn exact(matched: bool) -> MatchVerdict {
        MatchVerdict {
            matched,
            mode: MatchMode::ExactNormalized,
            judge_raw: None,
            judge_error: None,
        }
    }
}

/// Prompt sent to the judge backend for one equivalence query.
pub fn judge_prompt(prediction: &str, truth: &str) -> String {
    format!(
        "{role}\n\
         You compare a predicted reference string against the ground-truth reference \
         for a document-extraction task.\n\
         Reply YES if they identify the same reference despite formatting differences, \
         NO otherwise. The first token of your reply must be YES or NO.\n\
         \n\
         Ground truth: {truth}\n\
         Prediction: {prediction}\n",
        role = role_header("judge"),
    )
}

/// Match a prediction against the ground truth.
///
/// Absent prediction → unmatched. Otherwise exact match over
/// [`normalize_reference`] forms; when that fails and a `(backend, model)`
/// judge is supplied, the judge is asked once whether the pair is equivalent
/// (reply must start YES or NO). A judge failure falls back to the exact
/// verdict with `judge_error` set. The judge call's token usage is deliberately
/// not returned: judge overhead never counts toward agent metrics.
pub fn match_answer(
    prediction: Option<&str>,
    truth: &str,
    judge: Option<(&dyn ChatBackend, &str)>,
) -> MatchVerdict {
    assert!(!truth.is_empty(), "ground truth must be non-empty");
    let Some(prediction) = prediction else {
        return MatchVerdict::exact(false);
    };
    if normalize_reference(prediction) == normalize_reference(truth) {
        return MatchVerdict::exact(true);
    }
    let Some((backend, model)) = judge else {
        return MatchVerdict::exact(false);
    };

    let messages = [ChatMessage::system(judge_prompt(prediction, truth))];
    match backend.complete(&messages, model, &DecodingParams::default()) {
        Ok(response) => {
            let first = response
                .content
                .split_whitespace()
                .next()
                .unwrap_or("")
                .trim_matches(|c: char| !c.is_ascii_alphabetic())
                .to_ascii_uppercase();
            match first.as_str() {
                "YES" | "NO" => MatchVerdict {
                    matched: first == "YES",
                    mode: MatchMode::LlmJudge,
                    judge_raw: Some(response.content),
                    judge_error: None,
                },
                _ => MatchVerdict {
                    matched: false,
                    mode: MatchMode::ExactNormalized,
                    judge_raw: Some(response.content),
                    judge_error: Some("judge reply does not start with YES or NO".to_string()),
                },
            }
        }
        Err(e) => MatchVerdict {
            matched: false,
            mode: MatchMode::ExactNormalized,
            judge_raw: None,
            judge_error: Some(e.to_string()),
        },
    }
}

/// One scored task, as fed to [`aggregate`]. `usage` is the agent system's
/// own usage (assistant calls plus executor-free observations) — judge calls
/// are never included. `model` is the model that served the assistant role
/// for this task, for cost lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub usage: UsageRecord,
    pub model: String,
    pub doc_tokens: usize,
    pub verdict: MatchVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: usize,
    pub bin_hi: usize,
    pub count: usize,
}

/// Half-open bins `[k·width, (k+1)·width)` covering min..=max of `lengths`,
/// zero-count bins included in between. Empty input → no bins.
pub fn length_histogram(lengths: &[usize], bin_width: usize) -> Vec<HistogramBin> {
    assert!(bin_width > 0, "bin width must be positive");
    let Some(&min) = lengths.iter().min() else {
        return Vec::new();
    };
    let max = *lengths.iter().max().expect("non-empty");
    (min / bin_width..=max / bin_width)
        .map(|k| HistogramBin {
            bin_lo: k * bin_width,
            bin_hi: (k + 1) * bin_width,
            count: lengths.iter().filter(|&&len| len / bin_width == k).count(),
        })
        .collect()
}

pub const DEFAULT_HISTOGRAM_BIN_WIDTH: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub solved: bool,
    pub api_calls: u64,
    pub cost: Decimal,
    pub doc_tokens: usize,
    pub mode: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub n_solved: usize,
    pub success_rate: f64,
    /// Absent when nothing was solved.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_api_calls_solved: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_cost_solved: Option<Decimal>,
    /// Token-length distribution of SOLVED documents.
    pub length_histogram: Vec<HistogramBin>,
    pub rows: Vec<TaskRow>,
}

impl EvalReport {
    /// Success rate as the conventional two-decimal percentage string.
    pub fn success_rate_percent(&self) -> String {
        format!("{:.2}%", self.success_rate * 100.0)
    }
}

/// Fold per-task results into an [`EvalReport`]. Averages cover solved tasks
/// only and are absent when nothing was solved; the histogram covers solved
/// documents at `bin_width` granularity. Fails if any row's model is missing
/// from the cost table.
pub fn aggregate(
    results: &[TaskResult],
    cost_table: &CostTable,
    bin_width: usize,
) -> Result<EvalReport, GatewayError> {
    let mut rows = Vec::with_capacity(results.len());
    for result in results {
        rows.push(TaskRow {
            task_id: result.task_id.clone(),
            solved: result.verdict.matched,
            api_calls: result.usage.api_calls,
            cost: cost_of(&result.usage, &result.model, cost_table)?,
            doc_tokens: result.doc_tokens,
            mode: result.verdict.mode,
        });
    }

    let n_tasks = rows.len();
    let solved: Vec<&TaskRow> = rows.iter().filter(|r| r.solved).collect();
    let n_solved = solved.len();
    let success_rate = if n_tasks == 0 {
        0.0
    } else {
        n_solved as f64 / n_tasks as f64
    };
    let (avg_api_calls_solved, avg_cost_solved) = if n_solved == 0 {
        (None, None)
    } else {
        let calls: u64 = solved.iter().map(|r| r.api_calls).sum();
        let cost: Decimal = solved.iter().map(|r| r.cost).sum();
        (
            Some(calls as f64 / n_solved as f64),
            Some(cost / Decimal::from(n_solved as u64)),
        )
    };
    let solved_lengths: Vec<usize> = solved.iter().map(|r| r.doc_tokens).collect();

    Ok(EvalReport {
        n_tasks,
        n_solved,
        success_rate,
        avg_api_calls_solved,
        avg_cost_solved,
        length_histogram: length_histogram(&solved_lengths, bin_width),
        rows,
    })
}

/// Persist a report as `report.json` plus `per_task.csv` under `dir`.
pub fn save_report(dir: &Path, report: &EvalReport) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report).map_err(io::Error::other)?,
    )?;
    let mut writer = csv::Writer::from_path(dir.join("per_task.csv"))?;
    writer
        .write_record([
            "task_id",
            "solved",
            "api_calls",
            "cost",
            "doc_tokens",
            "mode",
        ])
        .map_err(io::Error::other)?;
    for row in &report.rows {
        let mode = match row.mode {
            MatchMode::ExactNormalized => "exact_normalized",
            MatchMode::LlmJudge => "llm_judge",
        };
        writer
            .write_record([
                row.task_id.as_str(),
                if row.solved { "true" } else { "false" },
                &row.api_calls.to_string(),
                &row.cost.to_string(),
                &row.doc_tokens.to_string(),
                mode,
            ])
            .map_err(io::Error::other)?;
    }
    writer.flush()
}

pub fn load_report(dir: &Path) -> io::Result<EvalReport> {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?).map_err(io::Error::other)
}
