//! Deterministic scripted backend.
//!
//! A rulebook is an ordered list of `{when, reply}` rules; the first rule
//! whose condition matches the conversation wins. Conditions look at three
//! things: the role tag embedded as the first prompt line (`ROLE: assistant`),
//! substring presence across the whole conversation (memory hint tokens,
//! family tags, executor output), and the turn index (count of assistant
//! messages so far). No rule matching → a fixed fallback reply that contains
//! neither a final-answer marker nor code, so an unscripted conversation
//! runs to its turn cap instead of accidentally "answering".
//!
//! [`synthetic_rulebook`] pairs with [`crate::corpus::synthetic`]: it scripts
//! an assistant that can only extract a family's reference when that family's
//! insight is already in memory, a reflector that names the missing insight
//! for failed tasks, and an optimizer that unions insights for every family
//! hinted at anywhere in its prompt. Together they force the training loop to
//! converge family by family, with no model in sight.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    validate_messages, ChatBackend, ChatMessage, ChatResponse, ChatRole, DecodingParams,
    GatewayError, UsageRecord,
};
use crate::corpus::synthetic::{
    family_hint, family_of_id, family_tag, reference_prefix, FAMILY_NAMES,
};
use crate::corpus::tokenize::token_count;
use crate::corpus::Dataset;

/// Reply when no rule matches. Deliberately free of the final-answer marker
/// and of code fences.
pub const FALLBACK_REPLY: &str =
    "I am not sure how to proceed with this document yet. Let me re-read the available information.";

/// First line of every rendered prompt, so rules can target one role.
pub fn role_header(tag: &str) -> String {
    format!("ROLE: {tag}")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCondition {
    /// Matches the `ROLE: <tag>` first line of the prompt, when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_tag: Option<String>,
    /// Every listed needle must occur somewhere in the conversation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// Matches the count of assistant messages in the conversation, when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
}

impl RuleCondition {
    fn matches(&self, role: Option<&str>, haystack: &str, turn: usize) -> bool {
        if let Some(tag) = &self.role_tag {
            if role != Some(tag.as_str()) {
                return false;
            }
        }
        if let Some(required) = self.turn {
            if required != turn {
                return false;
            }
        }
        self.contains.iter().all(|needle| haystack.contains(needle))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub when: RuleCondition,
    pub reply: String,
}

/// Ordered rule list; serialized as a plain JSON array.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rulebook {
    pub rules: Vec<Rule>,
}

impl Rulebook {
    pub fn load(path: impl AsRef<Path>) -> Result<Rulebook, GatewayError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Rulebook(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Rulebook(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("rulebook serializes");
        std::fs::write(path, text)
            .map_err(|e| GatewayError::Rulebook(format!("cannot write {}: {e}", path.display())))
    }
}

/// Role tag embedded in the conversation: the `ROLE: <tag>` first line of the
/// first message, if present.
pub fn embedded_role_tag(messages: &[ChatMessage]) -> Option<&str> {
    let first_line = messages.first()?.content.lines().next()?;
    first_line.strip_prefix("ROLE: ").map(str::trim)
}

/// Turn index: how many assistant messages the conversation already holds.
pub fn turn_index(messages: &[ChatMessage]) -> usize {
    messages
        .iter()
        .filter(|m| m.role == ChatRole::Assistant)
        .count()
}

/// Pure rule evaluation: first matching rule's reply verbatim, fallback
/// otherwise. Usage is synthesized from heuristic token counts.
pub fn scripted_complete(
    rulebook: &Rulebook,
    messages: &[ChatMessage],
    model: &str,
) -> Result<ChatResponse, GatewayError> {
    validate_messages(messages)?;
    let role = embedded_role_tag(messages);
    let turn = turn_index(messages);
    let haystack = messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n");

    let reply = rulebook
        .rules
        .iter()
        .find(|rule| rule.when.matches(role, &haystack, turn))
        .map(|rule| rule.reply.as_str())
        .unwrap_or(FALLBACK_REPLY);

    let prompt_tokens: usize = messages.iter().map(|m| token_count(&m.content)).sum();
    Ok(ChatResponse {
        content: reply.to_string(),
        usage: UsageRecord {
            prompt_tokens: prompt_tokens as u64,
            completion_tokens: token_count(reply) as u64,
            api_calls: 1,
        },
        model: model.to_string(),
    })
}

/// Deterministic backend over an immutable rulebook. The call counter is
/// telemetry only; responses depend solely on (rulebook, messages, model).
pub struct ScriptedBackend {
    rulebook: Rulebook,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(rulebook: Rulebook) -> Self {
        ScriptedBackend {
            rulebook,
            calls: AtomicU64::new(0),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(ScriptedBackend::new(Rulebook::load(path)?))
    }

    /// Number of complete() calls served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn rulebook(&self) -> &Rulebook {
        &self.rulebook
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        model: &str,
        _params: &DecodingParams,
    ) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        scripted_complete(&self.rulebook, messages, model)
    }
}

/// Language the scripted assistant writes its extraction snippets in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptFlavor {
    Python,
    Shell,
}

impl ScriptFlavor {
    /// Interpreter argv the agent config should use with this flavor.
    pub fn interpreter(&self) -> Vec<String> {
        match self {
            ScriptFlavor::Python => vec!["python3".to_string()],
            ScriptFlavor::Shell => vec!["sh".to_string()],
        }
    }

    fn fence_tag(&self) -> &'static str {
        match self {
            ScriptFlavor::Python => "python",
            ScriptFlavor::Shell => "sh",
        }
    }

    fn extraction_code(&self, tag: &str) -> String {
        match self {
            ScriptFlavor::Python => format!(
                r#"import re
xml = open("invoice.xml", encoding="utf-8").read()
match = re.search(r"<{tag}>\s*([^<]*?)\s*</{tag}>", xml)
print("EXTRACTED: " + (match.group(1) if match else "nothing"))"#
            ),
            ScriptFlavor::Shell => format!(
                r#"ref=$(sed -n 's:.*<{tag}>\(.*\)</{tag}>.*:\1:p' invoice.xml | head -n 1)
echo "EXTRACTED: ${{ref:-nothing}}""#
            ),
        }
    }
}

/// Insight the scripted optimizer distills for one family. Note it names the
/// element without angle brackets: the literal `<Tag>` form must only ever
/// come from a document, or every task would look like every family.
fn family_insight(family: &str) -> String {
    format!(
        "When the document has a {tag} element, run a script that reads invoice.xml and prints \
         the text inside {tag}; references there start with {prefix}. {hint}",
        tag = family_tag(family),
        prefix = reference_prefix(family),
        hint = family_hint(family),
    )
}

/// Build the rulebook that makes `dataset` (from
/// [`crate::corpus::synthetic::generate_synthetic_corpus`]) fully learnable:
///
/// 1. per-task answer rules — executor printed `EXTRACTED: <ref>` → final answer;
/// 2. per-family extraction rules — document shows `<Tag>` *and* memory carries
///    the family's hint token → reply with an extraction script;
/// 3. reflector rules — answered trajectories are Correct; failures get a
///    reflection naming the family's element and hint;
/// 4. optimizer rules — one rule per non-empty family subset, largest first,
///    emitting a numbered insight list for exactly the hinted families.
pub fn synthetic_rulebook(dataset: &Dataset, flavor: ScriptFlavor) -> Rulebook {
    let mut families: Vec<&'static str> = Vec::new();
    for task in &dataset.instances {
        if let Some(f) = family_of_id(&task.id) {
            if !families.contains(&f) {
                families.push(f);
            }
        }
    }
    families.sort_by_key(|f| FAMILY_NAMES.iter().position(|n| n == f));

    let mut rules = Vec::new();

    for task in &dataset.instances {
        let Some(reference) = &task.answer else {
            continue;
        };
        rules.push(Rule {
            when: RuleCondition {
                role_tag: Some("assistant".to_string()),
                contains: vec![format!("EXTRACTED: {reference}")],
                turn: None,
            },
            reply: format!("The script found the reference.\n\nFINAL ANSWER: {reference}"),
        });
    }

    for family in &families {
        let tag = family_tag(family);
        rules.push(Rule {
            when: RuleCondition {
                role_tag: Some("assistant".to_string()),
                contains: vec![format!("<{tag}>"), family_hint(family)],
                turn: None,
            },
            reply: format!(
                "The insights point at the {tag} element; extracting it from invoice.xml.\n\n\
                 ```{fence}\n{code}\n```",
                fence = flavor.fence_tag(),
                code = flavor.extraction_code(&tag),
            ),
        });
    }

    rules.push(Rule {
        when: RuleCondition {
            role_tag: Some("reflector".to_string()),
            contains: vec!["Outcome: answered".to_string()],
            turn: None,
        },
        reply: "Verdict: Correct\nKey steps: The assistant extracted the reference from the \
                document and returned it in the required format."
            .to_string(),
    });
    for family in &families {
        rules.push(Rule {
            when: RuleCondition {
                role_tag: Some("reflector".to_string()),
                contains: vec![reference_prefix(family)],
                turn: None,
            },
            reply: format!(
                "Verdict: Incorrect\nKey steps: The assistant never looked inside the {tag} \
                 element of invoice.xml. {insight}",
                tag = family_tag(family),
                insight = family_insight(family),
            ),
        });
    }

    // Optimizer: the largest subset whose hints all occur in the prompt wins,
    // so the emitted memory is the union of current-memory families and
    // failed-batch families — monotone by construction.
    let k = families.len() as u32;
    let mut masks: Vec<u32> = (1..(1u32 << k)).collect();
    masks.sort_by_key(|m| std::cmp::Reverse(m.count_ones()));
    for mask in masks {
        let subset: Vec<&str> = families
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, f)| *f)
            .collect();
        let contains = subset.iter().map(|f| family_hint(f)).collect();
        let reply = subset
            .iter()
            .enumerate()
            .map(|(i, f)| format!("{}. {}", i + 1, family_insight(f)))
            .collect::<Vec<_>>()
            .join("\n");
        rules.push(Rule {
            when: RuleCondition {
                role_tag: Some("optimizer".to_string()),
                contains,
                turn: None,
            },
            reply,
        });
    }

    Rulebook { rules }
}
