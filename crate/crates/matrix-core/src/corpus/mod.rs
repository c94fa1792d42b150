//! Dataset loading, splitting, and synthesis.
//!
//! A corpus is a JSON Lines manifest, one task per line:
//!
//! ```json
//! {"id": "inv-001", "document": {"inline": "<Invoice>...</Invoice>"}, "transport_reference": "REF-123"}
//! {"id": "inv-002", "document": {"path": "docs/inv-002.xml"}, "transport_reference": null}
//! ```
//!
//! Documents are inline XML or a path relative to the manifest. A null
//! reference means the document has no valid transport reference; such
//! instances can be excluded from splits with [`SplitSpec::valid_only`].

pub mod synthetic;
pub mod tokenize;
pub mod ubl;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::tokenize::token_count;
use self::ubl::UblParseError;

/// Query attached to every loaded instance unless overridden in run config.
pub const DEFAULT_QUERY: &str =
    "What is the transport reference of this invoice? Answer with the reference string only.";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest record at line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("duplicate task id `{id}` at line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("invalid XML for task `{id}` at line {line}: {source}")]
    Xml {
        line: usize,
        id: String,
        #[source]
        source: UblParseError,
    },
    #[error("train_size {train_size} must be smaller than the {eligible} eligible instances")]
    TrainSizeTooLarge { train_size: usize, eligible: usize },
}

/// One invoice document, with its heuristic token length computed on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvoiceDocument {
    pub id: String,
    pub xml_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<PathBuf>,
    pub token_length: usize,
}

impl InvoiceDocument {
    pub fn new(id: impl Into<String>, xml_text: impl Into<String>) -> Self {
        let xml_text = xml_text.into();
        let token_length = token_count(&xml_text);
        InvoiceDocument {
            id: id.into(),
            xml_text,
            source_path: None,
            token_length,
        }
    }
}

/// One (document, query, answer) task. `answer` is absent when the document
/// has no valid transport reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub document: InvoiceDocument,
    pub query: String,
    pub answer: Option<String>,
}

/// An ordered set of tasks. Order is manifest order and is stable across
/// loads; splits keep the relative order of the instances they select.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<TaskInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TaskInstance> {
        self.instances.iter().find(|t| t.id == id)
    }

    /// Replace the query on every instance (run-config override).
    pub fn with_query(mut self, query: &str) -> Self {
        for instance in &mut self.instances {
            instance.query = query.to_string();
        }
        self
    }
}

/// How to carve a dataset into train and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_size: usize,
    /// Restrict to instances with a non-null answer before splitting.
    #[serde(default)]
    pub valid_only: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    document: DocumentSource,
    #[serde(default)]
    transport_reference: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DocumentSource {
    Inline(String),
    Path(String),
}

/// Load a JSONL manifest. Blank lines are skipped; any malformed record,
/// duplicate id, missing document file, or ill-formed XML is a hard error
/// naming the offending line.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());

    let mut seen = BTreeSet::new();
    let mut instances = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Record {
                line: line_no,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }

        let (xml_text, source_path) = match record.document {
            DocumentSource::Inline(xml) => (xml, None),
            DocumentSource::Path(rel) => {
                let full = base.join(&rel);
                let xml = fs::read_to_string(&full).map_err(|e| CorpusError::Io {
                    path: full.clone(),
                    source: e,
                })?;
                (xml, Some(full))
            }
        };
        ubl::parse_ubl(&xml_text).map_err(|e| CorpusError::Xml {
            line: line_no,
            id: record.id.clone(),
            source: e,
        })?;

        let answer = record.transport_reference;
        if let Some(reference) = &answer {
            if normalizes_to_empty(reference) {
                return Err(CorpusError::Record {
                    line: line_no,
                    message: format!(
                        "transport_reference `{reference}` is empty after normalization"
                    ),
                });
            }
            // Not all references are guaranteed to appear verbatim; some may
            // need composition from several fields. Log, don't reject.
            if !xml_text.contains(reference.as_str()) {
                tracing::warn!(
                    task = %record.id,
                    "ground-truth reference does not occur verbatim in the document"
                );
            }
        }

        let mut document = InvoiceDocument::new(record.id.clone(), xml_text);
        document.source_path = source_path;
        instances.push(TaskInstance {
            id: record.id,
            document,
            query: DEFAULT_QUERY.to_string(),
            answer,
        });
    }

    Ok(Dataset { name, instances })
}

/// Write a dataset back out as a JSONL manifest with inline documents.
pub fn write_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut out = String::new();
    for task in &dataset.instances {
        let record = ManifestRecord {
            id: task.id.clone(),
            document: DocumentSource::Inline(task.document.xml_text.clone()),
            transport_reference: task.answer.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("manifest record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Split into train/test by a seeded uniform shuffle of the eligible
/// instances, taking the first `train_size` as the training set. Both sides
/// keep manifest order internally, so the same (dataset, spec) always yields
/// identical output.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), CorpusError> {
    let eligible: Vec<usize> = dataset
        .instances
        .iter()
        .enumerate()
        .filter(|(_, t)| !spec.valid_only || t.answer.is_some())
        .map(|(i, _)| i)
        .collect();
    if spec.train_size >= eligible.len() {
        return Err(CorpusError::TrainSizeTooLarge {
            train_size: spec.train_size,
            eligible: eligible.len(),
        });
    }

    let mut order = eligible.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let train_ids: BTreeSet<usize> = order[..spec.train_size].iter().copied().collect();

    let mut train = Vec::with_capacity(spec.train_size);
    let mut test = Vec::with_capacity(eligible.len() - spec.train_size);
    for i in eligible {
        let instance = dataset.instances[i].clone();
        if train_ids.contains(&i) {
            train.push(instance);
        } else {
            test.push(instance);
        }
    }
    Ok((
        Dataset {
            name: format!("{}-train", dataset.name),
            instances: train,
        },
        Dataset {
            name: format!("{}-test", dataset.name),
            instances: test,
        },
    ))
}

/// Whether a reference collapses to nothing under answer normalization
/// (trim, collapse whitespace, strip one trailing period and one surrounding
/// quote pair). Mirrors `evaluator::normalize_reference`, which lives above
/// this module in the dependency graph.
fn normalizes_to_empty(reference: &str) -> bool {
    let collapsed: String = reference.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = collapsed.strip_suffix('.').unwrap_or(&collapsed);
    let unquoted = strip_quote_pair(stripped);
    unquoted.is_empty()
}

fn strip_quote_pair(s: &str) -> &str {
    for quote in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(quote) && s.ends_with(quote) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write as _;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        path
    }

    fn inline_record(id: &str, reference: Option<&str>) -> String {
        let xml = format!(
            "<Invoice><ID>{id}</ID><Ref>{}</Ref></Invoice>",
            reference.unwrap_or("none")
        );
        serde_json::to_string(&serde_json::json!({
            "id": id,
            "document": {"inline": xml},
            "transport_reference": reference,
        }))
        .unwrap()
    }

    #[test]
    fn loads_inline_records_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let lines = [
            inline_record("a", Some("R-1")),
            inline_record("b", None),
            inline_record("c", Some("R-3")),
        ];
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let path = write_lines(dir.path(), "m.jsonl", &refs);
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.name, "m");
        let ids: Vec<_> = ds.instances.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(ds.instances[0].answer.as_deref(), Some("R-1"));
        assert_eq!(ds.instances[1].answer, None);
        assert_eq!(ds.instances[0].query, DEFAULT_QUERY);
        assert!(ds.instances[0].document.token_length > 0);
    }

    #[test]
    fn resolves_document_paths_relative_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("docs")).unwrap();
        fs::write(
            dir.path().join("docs/x.xml"),
            "<Invoice><ID>x</ID></Invoice>",
        )
        .unwrap();
        let line =
            r#"{"id": "x", "document": {"path": "docs/x.xml"}, "transport_reference": null}"#;
        let path = write_lines(dir.path(), "m.jsonl", &[line]);
        let ds = load_manifest(&path).unwrap();
        assert!(ds.instances[0].document.xml_text.contains("<ID>x</ID>"));
        assert!(ds.instances[0].document.source_path.is_some());
    }

    #[test]
    fn missing_document_field_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let good = inline_record("a", None);
        let lines = [good.as_str(), r#"{"id": "b"}"#];
        let path = write_lines(dir.path(), "m.jsonl", &lines);
        match load_manifest(&path).unwrap_err() {
            CorpusError::Record { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("document"), "{message}");
            }
            other => panic!("expected Record error, got {other}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let lines = [inline_record("a", None), inline_record("a", None)];
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let path = write_lines(dir.path(), "m.jsonl", &refs);
        assert!(matches!(
            load_manifest(&path).unwrap_err(),
            CorpusError::DuplicateId { line: 2, .. }
        ));
    }

    #[test]
    fn ill_formed_xml_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"id": "bad", "document": {"inline": "<Invoice><ID>1</Invoice>"}}"#;
        let path = write_lines(dir.path(), "m.jsonl", &[line]);
        match load_manifest(&path).unwrap_err() {
            CorpusError::Xml { line, id, .. } => {
                assert_eq!(line, 1);
                assert_eq!(id, "bad");
            }
            other => panic!("expected Xml error, got {other}"),
        }
    }

    #[test]
    fn reference_empty_after_normalization_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"id": "a", "document": {"inline": "<Invoice><ID>1</ID></Invoice>"}, "transport_reference": " . "}"#;
        let path = write_lines(dir.path(), "m.jsonl", &[line]);
        assert!(matches!(
            load_manifest(&path).unwrap_err(),
            CorpusError::Record { line: 1, .. }
        ));
    }

    #[test]
    fn non_substring_reference_still_loads() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"id": "a", "document": {"inline": "<Invoice><ID>1</ID></Invoice>"}, "transport_reference": "ELSEWHERE"}"#;
        let path = write_lines(dir.path(), "m.jsonl", &[line]);
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.instances[0].answer.as_deref(), Some("ELSEWHERE"));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let lines = [inline_record("a", Some("R-1")), inline_record("b", None)];
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let path = write_lines(dir.path(), "m.jsonl", &refs);
        let ds = load_manifest(&path).unwrap();
        let out = dir.path().join("copy.jsonl");
        write_manifest(&ds, &out).unwrap();
        let ds2 = load_manifest(&out).unwrap();
        assert_eq!(ds.instances, ds2.instances);
    }

    fn numbered_dataset(n: usize, null_every: usize) -> Dataset {
        let instances = (0..n)
            .map(|i| {
                let id = format!("t{i:03}");
                let answer = if null_every > 0 && i % null_every == 0 {
                    None
                } else {
                    Some(format!("R-{i}"))
                };
                let xml = format!("<Invoice><ID>{id}</ID><Ref>R-{i}</Ref></Invoice>");
                TaskInstance {
                    id: id.clone(),
                    document: InvoiceDocument::new(id, xml),
                    query: DEFAULT_QUERY.to_string(),
                    answer,
                }
            })
            .collect();
        Dataset {
            name: "synthetic-test".to_string(),
            instances,
        }
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let ds = numbered_dataset(30, 0);
        let spec = SplitSpec {
            seed: 7,
            train_size: 10,
            valid_only: false,
        };
        let (train, test) = split(&ds, &spec).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 20);
        let mut all: Vec<_> = train
            .instances
            .iter()
            .chain(&test.instances)
            .map(|t| t.id.clone())
            .collect();
        all.sort();
        let mut expected: Vec<_> = ds.instances.iter().map(|t| t.id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);

        let (train2, test2) = split(&ds, &spec).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);

        let other = split(&ds, &SplitSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(train.instances, other.0.instances);
    }

    #[test]
    fn split_keeps_manifest_order_within_sides() {
        let ds = numbered_dataset(20, 0);
        let spec = SplitSpec {
            seed: 3,
            train_size: 8,
            valid_only: false,
        };
        let (train, test) = split(&ds, &spec).unwrap();
        for side in [&train, &test] {
            let ids: Vec<_> = side.instances.iter().map(|t| t.id.clone()).collect();
            let mut sorted = ids.clone();
            sorted.sort();
            assert_eq!(
                ids, sorted,
                "ids are zero-padded, so manifest order is sorted order"
            );
        }
    }

    #[test]
    fn valid_only_excludes_null_answers() {
        let ds = numbered_dataset(20, 4);
        let spec = SplitSpec {
            seed: 1,
            train_size: 5,
            valid_only: true,
        };
        let (train, test) = split(&ds, &spec).unwrap();
        assert_eq!(train.len() + test.len(), 15);
        assert!(train
            .instances
            .iter()
            .chain(&test.instances)
            .all(|t| t.answer.is_some()));
    }

    #[test]
    fn oversized_train_size_is_rejected() {
        let ds = numbered_dataset(5, 0);
        let spec = SplitSpec {
            seed: 1,
            train_size: 5,
            valid_only: false,
        };
        assert!(matches!(
            split(&ds, &spec).unwrap_err(),
            CorpusError::TrainSizeTooLarge {
                train_size: 5,
                eligible: 5
            }
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..40, seed in 0u64..1000) {
            let ds = numbered_dataset(n, 3);
            let eligible = ds.instances.iter().filter(|t| t.answer.is_some()).count();
            prop_assume!(eligible >= 2);
            let train_size = 1 + seed as usize % (eligible - 1);
            let spec = SplitSpec { seed, train_size, valid_only: true };
            let (train, test) = split(&ds, &spec).unwrap();
            prop_assert_eq!(train.len(), train_size);
            prop_assert_eq!(train.len() + test.len(), eligible);
            let train_ids: BTreeSet<_> = train.instances.iter().map(|t| t.id.clone()).collect();
            prop_assert!(test.instances.iter().all(|t| !train_ids.contains(&t.id)));
        }
    }
}
