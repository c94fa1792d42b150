//! Run configuration: a TOML file (or shipped preset) describing the data,
//! split, training, agent, model, provider, and cost settings of one
//! experiment. `${VAR}` references in the file are replaced from the
//! environment before parsing; secrets stay out of the file itself via the
//! provider's `api_key_env` indirection, and the persisted copy of the config
//! never contains a resolved key.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use matrix_core::agent::AgentConfig;
use matrix_core::corpus::SplitSpec;
use matrix_core::gateway::http::{HttpBackend, HttpBackendConfig};
use matrix_core::gateway::scripted::{Rulebook, ScriptedBackend};
use matrix_core::gateway::{ChatBackend, CostTable, RoleModelConfig};
use matrix_core::trainer::TrainConfig;

pub const PRESET_PAPER_FULL: &str = include_str!("../presets/paper-full.toml");
pub const PRESET_PAPER_ANONYMIZED: &str = include_str!("../presets/paper-anonymized.toml");

/// Shipped preset by name.
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "paper-full" => Some(PRESET_PAPER_FULL),
        "paper-anonymized" => Some(PRESET_PAPER_ANONYMIZED),
        _ => None,
    }
}

pub const PRESET_NAMES: &[&str] = &["paper-full", "paper-anonymized"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitSection,
    pub train: TrainSection,
    #[serde(default)]
    pub agent: AgentConfig,
    pub models: RoleModelConfig,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub costs: CostTable,
    pub output: OutputConfig,
    #[serde(default)]
    pub baseline: BaselineSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset manifest (see the corpus manifest format).
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSection {
    #[serde(flatten)]
    pub spec: SplitSpec,
    /// Documented size of the resulting test side; mismatches warn but do
    /// not fail, since local datasets may be subsets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_test_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_context_budget")]
    pub context_budget: usize,
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
    #[serde(default = "default_max_entries")]
    pub max_entries: usize,
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
fn default_timeout_secs() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_trials() -> u32 {
    7
}

impl TrainSection {
    pub fn train_config(&self, models: RoleModelConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            context_budget: self.context_budget,
            models,
            eval_each_epoch: self.eval_each_epoch,
            max_entries: self.max_entries,
            workers: self.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderConfig {
    /// Any `/chat/completions`-style endpoint. The key is read from the
    /// named environment variable when the backend is built — before any
    /// task runs — never from the config file.
    OpenaiCompatible {
        base_url: String,
        api_key_env: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_base_ms: u64,
    },
    /// Deterministic offline backend driven by a rulebook JSON file.
    Scripted { rulebook: PathBuf },
}

impl ProviderConfig {
    /// Build the chat backend. Fails fast on a missing key or unreadable
    /// rulebook, without any network or subprocess activity.
    pub fn build_backend(&self) -> Result<Box<dyn ChatBackend>> {
        match self {
            ProviderConfig::OpenaiCompatible {
                base_url,
                api_key_env,
                timeout_secs,
                max_retries,
                backoff_base_ms,
            } => {
                let api_key = std::env::var(api_key_env).with_context(|| {
                    format!(
                        "environment variable {api_key_env} is not set \
                         (required by the configured live provider)"
                    )
                })?;
                let backend = HttpBackend::new(HttpBackendConfig {
                    base_url: base_url.clone(),
                    api_key: Some(api_key),
                    timeout: Duration::from_secs(*timeout_secs),
                    max_retries: *max_retries,
                    backoff_base: Duration::from_millis(*backoff_base_ms),
                })?;
                Ok(Box::new(backend))
            }
            ProviderConfig::Scripted { rulebook } => {
                let text = fs::read_to_string(rulebook).with_context(|| {
                    format!("cannot read scripted rulebook {}", rulebook.display())
                })?;
                let rulebook: Rulebook = serde_json::from_str(&text)
                    .context("scripted rulebook is not valid rule JSON")?;
                Ok(Box::new(ScriptedBackend::new(rulebook)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSection {
    #[serde(default = "default_max_trials")]
    pub max_trials: u32,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            max_trials: default_max_trials(),
        }
    }
}

impl RunConfig {
    /// Static checks, run before any network or subprocess activity.
    pub fn validate(&self) -> Result<()> {
        self.train
            .train_config(self.models.clone())
            .validate()
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        if self.agent.max_turns == 0 {
            bail!("agent.max_turns must be positive");
        }
        if self.agent.interpreter.is_empty() {
            bail!("agent.interpreter must name an interpreter");
        }
        for (role, model) in [
            ("assistant_model", &self.models.assistant_model),
            ("reflector_model", &self.models.reflector_model),
            ("optimizer_model", &self.models.optimizer_model),
            ("judge_model", &self.models.judge_model),
        ] {
            if model.is_empty() {
                bail!("models.{role} must not be empty");
            }
        }
        if self.baseline.max_trials == 0 {
            bail!("baseline.max_trials must be positive");
        }
        Ok(())
    }
}

/// Replace every `${NAME}` with the named environment variable's value.
/// Unset variables and malformed references are errors.
pub fn interpolate_env(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find('}') else {
            bail!("unterminated ${{...}} reference in config");
        };
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            bail!("invalid environment variable reference ${{{name}}}");
        }
        let value = std::env::var(name).with_context(|| {
            format!("environment variable {name} referenced in config is not set")
        })?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let interpolated = interpolate_env(text)?;
    toml::from_str(&interpolated).context("cannot parse run config")
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in config {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_presets_parse_and_validate() {
        for name in PRESET_NAMES {
            let config = parse_config(preset(name).unwrap())
                .unwrap_or_else(|e| panic!("preset {name}: {e:#}"));
            config.validate().unwrap();
            assert_eq!(config.agent.max_turns, 5, "{name}");
            assert_eq!(config.train.batch_size, 14, "{name}");
            assert_eq!(config.baseline.max_trials, 7, "{name}");
            assert_eq!(config.models.optimizer_model, "gpt-4o", "{name}");
        }
    }

    #[test]
    fn presets_encode_the_two_splits() {
        let full = parse_config(PRESET_PAPER_FULL).unwrap();
        assert_eq!(full.split.spec.train_size, 60);
        assert_eq!(full.split.expected_test_size, Some(704));
        assert!(!full.split.spec.valid_only);

        let anon = parse_config(PRESET_PAPER_ANONYMIZED).unwrap();
        assert_eq!(anon.split.spec.train_size, 8);
        assert_eq!(anon.split.expected_test_size, Some(42));
        assert!(anon.split.spec.valid_only);
    }

    #[test]
    fn env_references_are_interpolated() {
        std::env::set_var("MATRIX_TEST_INTERP", "fill");
        assert_eq!(
            interpolate_env("a ${MATRIX_TEST_INTERP} z").unwrap(),
            "a fill z"
        );
        assert_eq!(interpolate_env("no refs").unwrap(), "no refs");
        assert!(interpolate_env("${MATRIX_TEST_UNSET_XYZ}")
            .unwrap_err()
            .to_string()
            .contains("MATRIX_TEST_UNSET_XYZ"));
        assert!(interpolate_env("${unclosed").is_err());
        assert!(interpolate_env("${bad name}").is_err());
    }

    #[test]
    fn missing_api_key_fails_backend_construction() {
        let provider = ProviderConfig::OpenaiCompatible {
            base_url: "http://127.0.0.1:1/v1".into(),
            api_key_env: "MATRIX_TEST_NO_SUCH_KEY".into(),
            timeout_secs: 1,
            max_retries: 0,
            backoff_base_ms: 1,
        };
        let Err(err) = provider.build_backend() else {
            panic!("backend construction should fail without the key")
        };
        assert!(err.to_string().contains("MATRIX_TEST_NO_SUCH_KEY"));
    }

    #[test]
    fn scripted_provider_round_trips_a_rulebook_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rules.json");
        fs::write(&path, "[]").unwrap();
        let provider = ProviderConfig::Scripted {
            rulebook: path.clone(),
        };
        provider.build_backend().unwrap();

        fs::write(&path, "{not json").unwrap();
        assert!(provider.build_backend().is_err());
    }

    #[test]
    fn validation_rejects_zeroed_sections() {
        let mut config = parse_config(PRESET_PAPER_FULL).unwrap();
        config.train.batch_size = 0;
        assert!(config.validate().is_err());

        let mut config = parse_config(PRESET_PAPER_FULL).unwrap();
        config.agent.interpreter.clear();
        assert!(config.validate().is_err());

        let mut config = parse_config(PRESET_PAPER_FULL).unwrap();
        config.models.judge_model.clear();
        assert!(config.validate().is_err());
    }

    #[test]
    fn run_config_survives_a_json_round_trip() {
        let config = parse_config(PRESET_PAPER_ANONYMIZED).unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        assert!(
            !json.to_lowercase().contains("\"api_key\":"),
            "no resolved key field is ever serialized, only the env-var name"
        );
        assert!(json.contains("api_key_env"));
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }
}
