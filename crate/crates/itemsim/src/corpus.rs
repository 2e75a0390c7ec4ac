//! Item bank domain types: blueprint topics, provenance, items, and the
//! persistent JSON Lines bank.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version written into every bank record.
pub const BANK_SCHEMA_VERSION: u32 = 1;

/// Option labels in order. Items always carry exactly these four.
pub const OPTION_LABELS: [char; 4] = ['A', 'B', 'C', 'D'];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("blueprint level {level} is empty")]
    EmptyBlueprintLevel { level: &'static str },
    #[error("topic descriptor is empty")]
    EmptyDescriptor,
    #[error("item {id}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("bank record on line {line}: schema_version {found} is not supported (expected {expected})")]
    SchemaVersion {
        line: usize,
        found: u32,
        expected: u32,
    },
    #[error("bank record on line {line}: {source}")]
    Record {
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("seed data: {0}")]
    SeedData(String),
}

/// The exam's internal three-level content hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlueprintPath {
    pub level1: String,
    pub level2: String,
    pub level3: String,
}

impl BlueprintPath {
    pub fn new(
        level1: impl Into<String>,
        level2: impl Into<String>,
        level3: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let path = Self {
            level1: level1.into(),
            level2: level2.into(),
            level3: level3.into(),
        };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (level, value) in [
            ("level1", &self.level1),
            ("level2", &self.level2),
            ("level3", &self.level3),
        ] {
            if value.trim().is_empty() {
                return Err(CorpusError::EmptyBlueprintLevel { level });
            }
        }
        Ok(())
    }

    /// Underscore-joined path, used for guided generation filenames.
    pub fn joined(&self) -> String {
        format!("{}_{}_{}", self.level1, self.level2, self.level3)
    }
}

impl fmt::Display for BlueprintPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} > {} > {}", self.level1, self.level2, self.level3)
    }
}

/// A public EPA activity phrase, optionally linked to its blueprint triplet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpaTopic {
    pub descriptor: String,
    pub blueprint: Option<BlueprintPath>,
}

impl EpaTopic {
    pub fn new(
        descriptor: impl Into<String>,
        blueprint: Option<BlueprintPath>,
    ) -> Result<Self, CorpusError> {
        let topic = Self {
            descriptor: descriptor.into(),
            blueprint,
        };
        topic.validate()?;
        Ok(topic)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.descriptor.trim().is_empty() {
            return Err(CorpusError::EmptyDescriptor);
        }
        if let Some(bp) = &self.blueprint {
            bp.validate()?;
        }
        Ok(())
    }

    /// URL-safe slug of the descriptor, used in item ids.
    pub fn slug(&self) -> String {
        slugify(&self.descriptor)
    }
}

/// Generation strategy an item was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Naive,
    Guided,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Naive => write!(f, "naive"),
            Strategy::Guided => write!(f, "guided"),
        }
    }
}

/// How an item came to exist: model, strategy, sampling parameters, run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider_id: String,
    pub strategy: Strategy,
    pub temperature: f64,
    pub max_tokens: u32,
    pub run_id: String,
    pub created_at: DateTime<Utc>,
}

impl Provenance {
    pub fn validate(&self) -> Result<(), String> {
        if self.provider_id.trim().is_empty() {
            return Err("provider_id is empty".into());
        }
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature {} is negative", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

/// One labeled answer option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: char,
    pub text: String,
}

/// One multiple-choice question: stem, four labeled options, answer key,
/// topic linkage and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub stem: String,
    pub options: Vec<AnswerOption>,
    pub answer_key: char,
    pub topic: EpaTopic,
    pub provenance: Provenance,
    pub raw_text: String,
}

impl Item {
    /// Builds a validated item. Stems and option texts are normalized so they
    /// contain no line breaks (layout is not semantic).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        options: Vec<AnswerOption>,
        answer_key: char,
        topic: EpaTopic,
        provenance: Provenance,
        raw_text: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let item = Self {
            id: id.into(),
            stem: normalize_line(&stem.into()),
            options: options
                .into_iter()
                .map(|o| AnswerOption {
                    label: o.label,
                    text: normalize_line(&o.text),
                })
                .collect(),
            answer_key,
            topic,
            provenance,
            raw_text: raw_text.into(),
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |reason: String| CorpusError::InvalidItem {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(fail("empty id".into()));
        }
        if self.stem.trim().is_empty() {
            return Err(fail("empty stem".into()));
        }
        if self.options.len() != 4 {
            return Err(fail(format!(
                "expected 4 options, found {}",
                self.options.len()
            )));
        }
        for (opt, expected) in self.options.iter().zip(OPTION_LABELS) {
            if opt.label != expected {
                return Err(fail(format!(
                    "option labels must be A,B,C,D in order; found {}",
                    opt.label
                )));
            }
            if opt.text.trim().is_empty() {
                return Err(fail(format!("empty text for option {}", opt.label)));
            }
        }
        if !OPTION_LABELS.contains(&self.answer_key) {
            return Err(fail(format!("answer key {} not in A-D", self.answer_key)));
        }
        self.topic.validate()?;
        self.provenance.validate().map_err(|r| fail(r))?;
        if self.provenance.strategy == Strategy::Guided && self.topic.blueprint.is_none() {
            return Err(fail("guided item has no blueprint path".into()));
        }
        Ok(())
    }
}

/// Stem plus labeled options, answer excluded: the unit of embedding.
///
/// The output always has exactly five newline-separated segments.
pub fn canonical_text(item: &Item) -> String {
    let mut out = String::with_capacity(
        item.stem.len() + item.options.iter().map(|o| o.text.len() + 4).sum::<usize>() + 4,
    );
    out.push_str(&item.stem);
    for opt in &item.options {
        out.push('\n');
        out.push(opt.label);
        out.push_str(") ");
        out.push_str(&opt.text);
    }
    out
}

/// Item id scheme: `{run_id}/{provider_id}/{strategy}/{topic-slug}/Q{n}`.
pub fn make_item_id(
    run_id: &str,
    provider_id: &str,
    strategy: Strategy,
    topic: &EpaTopic,
    number: u32,
) -> String {
    format!(
        "{}/{}/{}/{}/Q{}",
        run_id,
        provider_id,
        strategy,
        topic.slug(),
        number
    )
}

/// Collapses all whitespace (including line breaks) to single spaces and
/// trims. Non-whitespace characters pass through verbatim.
pub fn normalize_line(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_space = true;
    for ch in text.chars() {
        if ch == '\n' || ch == '\r' || ch == '\t' || ch == ' ' {
            if !in_space {
                out.push(' ');
                in_space = true;
            }
        } else {
            out.push(ch);
            in_space = false;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Lowercase slug: alphanumerics kept, every other run becomes one hyphen.
pub fn slugify(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_sep = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('-');
            }
            pending_sep = false;
            for low in ch.to_lowercase() {
                out.push(low);
            }
        } else {
            pending_sep = true;
        }
    }
    out
}

/// In-memory item bank with a (topic, strategy, provider) index.
///
/// A value object: share read-only across threads freely; mutate from a
/// single writer.
#[derive(Debug, Clone, Default)]
pub struct ItemBank {
    items: Vec<Item>,
    by_id: BTreeMap<String, usize>,
    index: BTreeMap<(String, Strategy, String), Vec<usize>>,
}

impl PartialEq for ItemBank {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl ItemBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a validated item; rejects duplicate ids by name.
    pub fn insert(&mut self, item: Item) -> Result<(), CorpusError> {
        item.validate()?;
        if self.by_id.contains_key(&item.id) {
            return Err(CorpusError::DuplicateId(item.id));
        }
        let idx = self.items.len();
        self.by_id.insert(item.id.clone(), idx);
        self.index
            .entry((
                item.topic.descriptor.clone(),
                item.provenance.strategy,
                item.provenance.provider_id.clone(),
            ))
            .or_default()
            .push(idx);
        self.items.push(item);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    /// Items inserted under (topic, strategy, provider), in insertion order.
    pub fn lookup(&self, topic_descriptor: &str, strategy: Strategy, provider_id: &str) -> Vec<&Item> {
        self.index
            .get(&(topic_descriptor.to_string(), strategy, provider_id.to_string()))
            .map(|ids| ids.iter().map(|&i| &self.items[i]).collect())
            .unwrap_or_default()
    }

    /// All items for a topic under one strategy, any provider, insertion order.
    pub fn lookup_strategy(&self, topic_descriptor: &str, strategy: Strategy) -> Vec<&Item> {
        self.items
            .iter()
            .filter(|it| {
                it.provenance.strategy == strategy && it.topic.descriptor == topic_descriptor
            })
            .collect()
    }

    /// Distinct topics in first-insertion order.
    pub fn topics(&self) -> Vec<&EpaTopic> {
        let mut seen = Vec::new();
        for item in &self.items {
            if !seen
                .iter()
                .any(|t: &&EpaTopic| t.descriptor == item.topic.descriptor)
            {
                seen.push(&item.topic);
            }
        }
        seen
    }

    /// Distinct provider ids holding items under `strategy`, first-insertion order.
    pub fn providers(&self, strategy: Strategy) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for item in &self.items {
            if item.provenance.strategy == strategy
                && !seen.contains(&item.provenance.provider_id)
            {
                seen.push(item.provenance.provider_id.clone());
            }
        }
        seen
    }
}

#[derive(Serialize, Deserialize)]
struct BankRecord {
    id: String,
    stem: String,
    options: Vec<AnswerOption>,
    answer_key: char,
    topic: EpaTopic,
    provenance: Provenance,
    raw_text: String,
    schema_version: u32,
}

/// Writes the bank as UTF-8 JSON Lines, one record per item, insertion order.
pub fn bank_save(bank: &ItemBank, path: &Path) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for item in bank.items() {
        let record = BankRecord {
            id: item.id.clone(),
            stem: item.stem.clone(),
            options: item.options.clone(),
            answer_key: item.answer_key,
            topic: item.topic.clone(),
            provenance: item.provenance.clone(),
            raw_text: item.raw_text.clone(),
            schema_version: BANK_SCHEMA_VERSION,
        };
        let line = serde_json::to_string(&record).expect("bank record serializes");
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Loads a JSON Lines bank, re-validating every record.
pub fn bank_load(path: &Path) -> Result<ItemBank, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut bank = ItemBank::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BankRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Record {
                line: lineno + 1,
                source,
            })?;
        if record.schema_version != BANK_SCHEMA_VERSION {
            return Err(CorpusError::SchemaVersion {
                line: lineno + 1,
                found: record.schema_version,
                expected: BANK_SCHEMA_VERSION,
            });
        }
        let item = Item {
            id: record.id,
            stem: record.stem,
            options: record.options,
            answer_key: record.answer_key,
            topic: record.topic,
            provenance: record.provenance,
            raw_text: record.raw_text,
        };
        bank.insert(item)?;
    }
    Ok(bank)
}

/// The shipped blueprint/EPA seed pairs, embedded from `data/seed_topics.json`.
pub fn seed_topics() -> Vec<EpaTopic> {
    load_seed_topics(include_str!("../data/seed_topics.json"))
        .expect("shipped seed data is valid")
}

/// Parses a seed topic file: a JSON array of `{descriptor, blueprint}` objects.
pub fn load_seed_topics(json: &str) -> Result<Vec<EpaTopic>, CorpusError> {
    let topics: Vec<EpaTopic> =
        serde_json::from_str(json).map_err(|e| CorpusError::SeedData(e.to_string()))?;
    for t in &topics {
        t.validate()?;
    }
    Ok(topics)
}

/// Reads a seed topic file from disk.
pub fn load_seed_topics_file(path: &Path) -> Result<Vec<EpaTopic>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_seed_topics(&text)
}
