//! Dialogue-act corpora: schema, ingestion, delexicalization, leave-one-out
//! splits and episodic task sampling.

mod delex;
mod sampler;
mod schema;
mod split;
mod synth;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use delex::{delexicalize, relexicalize, tokenize, valued_slots, Delexicalized};
pub use sampler::{sample_meta_task, MetaTask, ModalityIndex, TaskSampler};
pub use schema::{is_placeholder, placeholder, Schema, FORMAT};
pub use split::{make_split, Split, SplitMode, SplitSpec};
pub use synth::{gen_synthetic, SynthSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bad corpus format: {0}")]
    Format(String),
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("dialogue act has no acts")]
    EmptyDialogueAct,
    #[error("no example carries target label `{0}`")]
    MissingTarget(String),
    #[error("target `{label}` has {available} examples, need at least {needed}")]
    InsufficientTarget {
        label: String,
        available: usize,
        needed: usize,
    },
    #[error("modality `{label}` has {available} examples, need {needed}")]
    ModalityTooSmall {
        label: String,
        available: usize,
        needed: usize,
    },
    #[error("no modality in the pool can form a task")]
    NoEligibleModality,
}

/// One act of a dialogue act: `Inform(name=..., food=...)` in domain
/// `restaurant`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActEntry {
    pub domain: String,
    pub act: String,
    /// `(slot name, value)`; `None` for slots that are requested rather
    /// than informed.
    #[serde(default)]
    pub slots: Vec<(String, Option<String>)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueAct {
    pub acts: Vec<ActEntry>,
}

impl DialogueAct {
    pub fn domains(&self) -> BTreeSet<String> {
        self.acts.iter().map(|a| a.domain.clone()).collect()
    }

    pub fn act_types(&self) -> BTreeSet<String> {
        self.acts.iter().map(|a| a.act.clone()).collect()
    }

    /// Number of value-bearing slots.
    pub fn valued_slot_count(&self) -> usize {
        valued_slots(self).len()
    }
}

/// Raw record as stored in a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub da: DialogueAct,
    pub text: String,
}

/// Corpus file: versioned header, embedded schema and records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub format: String,
    pub schema: Schema,
    pub records: Vec<Record>,
}

/// A delexicalized DA–utterance pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusExample {
    /// Position in the corpus; example identity for set operations.
    pub id: usize,
    pub da: DialogueAct,
    pub tokens: Vec<String>,
    pub raw: String,
    pub domains: BTreeSet<String>,
    pub act_types: BTreeSet<String>,
    pub aligned: bool,
}

impl CorpusExample {
    pub fn has_label(&self, mode: SplitMode, label: &str) -> bool {
        match mode {
            SplitMode::Domain => self.domains.contains(label),
            SplitMode::ActType => self.act_types.contains(label),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub schema: Schema,
    pub examples: Vec<CorpusExample>,
}

impl Corpus {
    /// Validates and delexicalizes `records`. Labels are normalized to the
    /// schema's spelling.
    pub fn from_records(schema: Schema, records: Vec<Record>) -> Result<Self, CorpusError> {
        schema.validate()?;
        let mut examples = Vec::with_capacity(records.len());
        for (id, rec) in records.into_iter().enumerate() {
            schema.check_da(&rec.da)?;
            let mut da = rec.da;
            for entry in &mut da.acts {
                entry.domain = schema.domain_label(&entry.domain).expect("checked").to_string();
                entry.act = schema.act_label(&entry.act).expect("checked").to_string();
                let slots = schema.domain_slots(&entry.domain).to_vec();
                for (name, _) in &mut entry.slots {
                    *name = slots.iter().find(|s| s.eq_ignore_ascii_case(name)).expect("checked").clone();
                }
            }
            let d = delexicalize(&rec.text, &da);
            examples.push(CorpusExample {
                id,
                domains: da.domains(),
                act_types: da.act_types(),
                da,
                tokens: d.tokens,
                raw: rec.text,
                aligned: d.aligned,
            });
        }
        Ok(Self { schema, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn non_aligned(&self) -> usize {
        self.examples.iter().filter(|e| !e.aligned).count()
    }

    pub fn records(&self) -> Vec<Record> {
        self.examples
            .iter()
            .map(|e| Record {
                da: e.da.clone(),
                text: e.raw.clone(),
            })
            .collect()
    }

    pub fn to_file(&self) -> CorpusFile {
        CorpusFile {
            format: FORMAT.to_string(),
            schema: self.schema.clone(),
            records: self.records(),
        }
    }

    pub fn get(&self, id: usize) -> &CorpusExample {
        &self.examples[id]
    }
}

/// Parses corpus JSON. An object carries its own schema; a bare list of
/// records needs `schema`. An explicit `schema` overrides an embedded one.
pub fn parse_corpus(text: &str, schema: Option<&Schema>) -> Result<Corpus, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let (embedded, records) = match value {
        serde_json::Value::Array(_) => (None, serde_json::from_value::<Vec<Record>>(value)?),
        serde_json::Value::Object(_) => {
            let file: CorpusFile = serde_json::from_value(value)?;
            if file.format != FORMAT {
                return Err(CorpusError::Format(format!("unsupported format `{}`", file.format)));
            }
            (Some(file.schema), file.records)
        }
        _ => return Err(CorpusError::Format("expected an object or a list of records".into())),
    };
    let schema = match (schema, embedded) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => s,
        (None, None) => return Err(CorpusError::Format("a bare record list needs a schema file".into())),
    };
    let corpus = Corpus::from_records(schema, records)?;
    let bad = corpus.non_aligned();
    if bad > 0 {
        log::warn!("{bad} of {} examples are not slot-aligned", corpus.len());
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path, schema: Option<&Schema>) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, schema)
}

pub fn load_schema(path: &Path) -> Result<Schema, CorpusError> {
    Schema::from_json(&std::fs::read_to_string(path)?)
}

pub fn corpus_to_json(file: &CorpusFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("corpus serializes");
    s.push('\n');
    s
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<(), CorpusError> {
    std::fs::write(path, corpus_to_json(&corpus.to_file()))?;
    Ok(())
}
