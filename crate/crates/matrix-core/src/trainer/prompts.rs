//! Editable prompt templates for the reflector and optimizer roles.
//!
//! Templates are plain text with `{slot}` placeholders. The shipped defaults
//! live next to this file; a run can override them by pointing at a directory
//! with its own `reflector.txt` / `optimizer.txt`. Whatever is used gets
//! copied into the run directory for provenance.

use std::fs;
use std::io;
use std::path::Path;

use crate::agent::Memory;

use super::TrainError;

pub const DEFAULT_REFLECTOR_TEMPLATE: &str = include_str!("prompts/reflector.txt");
pub const DEFAULT_OPTIMIZER_TEMPLATE: &str = include_str!("prompts/optimizer.txt");

const REFLECTOR_SLOTS: [&str; 2] = ["{trajectory}", "{ground_truth}"];
const OPTIMIZER_SLOTS: [&str; 3] = ["{trajectories}", "{reflections}", "{memory}"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub reflector: String,
    pub optimizer: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            reflector: DEFAULT_REFLECTOR_TEMPLATE.to_string(),
            optimizer: DEFAULT_OPTIMIZER_TEMPLATE.to_string(),
        }
    }
}

/// Substitute `{name}` slots in one pass over the template. Substituted
/// values are never rescanned, so a value containing a slot-shaped string
/// cannot trigger a second substitution.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        for (name, value) in slots {
            if let Some(after) = rest.strip_prefix(name) {
                out.push_str(value);
                rest = after;
                continue 'scan;
            }
        }
        out.push('{');
        rest = &rest[1..];
    }
    out.push_str(rest);
    out
}

/// Memory entries as a numbered list, or an explicit empty marker.
pub fn render_memory_entries(memory: &Memory) -> String {
    if memory.entries.is_empty() {
        return "(no entries yet)".to_string();
    }
    memory
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| format!("{}. {entry}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

impl PromptTemplates {
    pub fn load(dir: &Path) -> io::Result<PromptTemplates> {
        Ok(PromptTemplates {
            reflector: fs::read_to_string(dir.join("reflector.txt"))?,
            optimizer: fs::read_to_string(dir.join("optimizer.txt"))?,
        })
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("reflector.txt"), &self.reflector)?;
        fs::write(dir.join("optimizer.txt"), &self.optimizer)
    }

    /// Every required slot must appear in its template.
    pub fn validate(&self) -> Result<(), TrainError> {
        for slot in REFLECTOR_SLOTS {
            if !self.reflector.contains(slot) {
                return Err(TrainError::Template(format!(
                    "reflector template is missing the {slot} slot"
                )));
            }
        }
        for slot in OPTIMIZER_SLOTS {
            if !self.optimizer.contains(slot) {
                return Err(TrainError::Template(format!(
                    "optimizer template is missing the {slot} slot"
                )));
            }
        }
        Ok(())
    }

    pub fn render_reflector(&self, trajectory_text: &str, ground_truth: &str) -> String {
        fill(
            &self.reflector,
            &[
                ("{trajectory}", trajectory_text),
                ("{ground_truth}", ground_truth),
            ],
        )
    }

    /// Optimizer prompt over already-serialized trajectory/reflection blocks
    /// (joined blank-line separated) and the current memory rendered via
    /// [`render_memory_entries`].
    pub fn render_optimizer(
        &self,
        trajectory_blocks: &[String],
        reflection_blocks: &[String],
        memory: &Memory,
    ) -> String {
        fill(
            &self.optimizer,
            &[
                ("{trajectories}", &trajectory_blocks.join("\n\n")),
                ("{reflections}", &reflection_blocks.join("\n\n")),
                ("{memory}", &render_memory_entries(memory)),
            ],
        )
    }
}
