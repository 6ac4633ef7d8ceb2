//! Sentence and entity data model shared by every stage, plus loaders for
//! CoNLL column files and JSONL corpora.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: expected at least 2 columns, found {found}")]
    Columns {
        path: PathBuf,
        line: usize,
        found: usize,
    },
    #[error("{path}:{line}: unrecognised tag {tag:?}")]
    Tag {
        path: PathBuf,
        line: usize,
        tag: String,
    },
    #[error("duplicate entity label {0:?} in type set")]
    DuplicateLabel(String),
    #[error("empty entity type set")]
    EmptyTypeSet,
    #[error("invalid entity type file {path}: {message}")]
    TypeFile { path: PathBuf, message: String },
}

/// A task sentence. Ids are dense within a [`TaskSet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub text: String,
}

impl Sentence {
    /// Trims the text and folds embedded line breaks into spaces.
    pub fn new(id: usize, text: &str) -> Self {
        Self {
            id,
            text: normalize_text(text),
        }
    }
}

pub(crate) fn normalize_text(text: &str) -> String {
    text.trim()
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect()
}

/// An entity surface string with its type label. Identity is the exact,
/// case-sensitive pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub entity_text: String,
    pub entity_label: String,
}

impl EntityMention {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            entity_text: text.into(),
            entity_label: label.into(),
        }
    }
}

impl fmt::Display for EntityMention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.entity_text, self.entity_label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub sentence: Sentence,
    pub entities: Vec<EntityMention>,
}

/// Why a mention was refused by [`validate_mentions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MentionProblem {
    Empty,
    NotInText(EntityMention),
    UnknownLabel(EntityMention),
    ConflictingLabels(String),
}

impl fmt::Display for MentionProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MentionProblem::Empty => write!(f, "empty entity text"),
            MentionProblem::NotInText(m) => write!(f, "mention {m} does not occur in the text"),
            MentionProblem::UnknownLabel(m) => write!(f, "mention {m} has an unknown label"),
            MentionProblem::ConflictingLabels(t) => {
                write!(f, "surface form {t:?} carries more than one label")
            }
        }
    }
}

/// Trims mentions, enforces the substring rule and (when `labels` is given)
/// label membership, and collapses duplicates to set semantics while keeping
/// first-seen order. Returns the surviving mentions and one problem per
/// rejected mention.
pub fn validate_mentions(
    text: &str,
    mentions: impl IntoIterator<Item = EntityMention>,
    labels: Option<&EntityTypeSet>,
) -> (Vec<EntityMention>, Vec<MentionProblem>) {
    let mut kept = Vec::new();
    let mut seen = HashSet::new();
    let mut problems = Vec::new();
    for m in mentions {
        let m = EntityMention::new(m.entity_text.trim(), m.entity_label.trim());
        if m.entity_text.is_empty() {
            problems.push(MentionProblem::Empty);
        } else if !text.contains(&m.entity_text) {
            problems.push(MentionProblem::NotInText(m));
        } else if labels.is_some_and(|l| !l.contains(&m.entity_label)) {
            problems.push(MentionProblem::UnknownLabel(m));
        } else if seen.insert(m.clone()) {
            kept.push(m);
        }
    }
    (kept, problems)
}

/// Surface strings that appear with two different labels in one mention list.
pub fn conflicting_surfaces(mentions: &[EntityMention]) -> Vec<String> {
    let mut first: BTreeMap<&str, &str> = BTreeMap::new();
    let mut out = Vec::new();
    for m in mentions {
        match first.get(m.entity_text.as_str()) {
            Some(&l) if l != m.entity_label => {
                if !out.contains(&m.entity_text) {
                    out.push(m.entity_text.clone());
                }
            }
            Some(_) => {}
            None => {
                first.insert(&m.entity_text, &m.entity_label);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTypeDef {
    pub label: String,
    pub full_name: String,
    pub definition: String,
}

impl EntityTypeDef {
    pub fn new(label: &str, full_name: &str, definition: &str) -> Self {
        Self {
            label: label.to_string(),
            full_name: full_name.to_string(),
            definition: definition.to_string(),
        }
    }
}

/// The run's entity types, in prompt order. Labels are unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct EntityTypeSet(Vec<EntityTypeDef>);

impl EntityTypeSet {
    pub fn new(defs: Vec<EntityTypeDef>) -> Result<Self, CorpusError> {
        if defs.is_empty() {
            return Err(CorpusError::EmptyTypeSet);
        }
        let mut seen = HashSet::new();
        for d in &defs {
            if !seen.insert(d.label.as_str()) {
                return Err(CorpusError::DuplicateLabel(d.label.clone()));
            }
        }
        Ok(Self(defs))
    }

    /// PER, ORG, LOC and MISC with the CoNLL-style definitions used by the
    /// shipped prompts.
    pub fn conll() -> Self {
        Self(vec![
            EntityTypeDef::new(
                "PER",
                "Person",
                "Denotes individual people or fictional characters. This includes full names, nicknames, and titles when they are part of the name.",
            ),
            EntityTypeDef::new(
                "ORG",
                "Organization",
                "Represents groups of people that are identified by a particular name. This includes companies, institutions, government bodies, agencies, and other formal organizations.",
            ),
            EntityTypeDef::new(
                "LOC",
                "Location",
                "Refers to geographical entities such as countries, cities, landmarks, mountains, rivers, and any other physical locations.",
            ),
            EntityTypeDef::new(
                "MISC",
                "Miscellaneous",
                "Covers entities that do not fall into the above categories but are still proper nouns. This includes nationalities, religions, events, languages, works of art, and other entities.",
            ),
        ])
    }

    /// Resolves a comma-separated label list against the built-in CoNLL
    /// definitions. Unknown labels get their own name as definition.
    pub fn from_labels(spec: &str) -> Result<Self, CorpusError> {
        let builtin = Self::conll();
        let defs = spec
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                builtin
                    .get(l)
                    .cloned()
                    .unwrap_or_else(|| EntityTypeDef::new(l, l, l))
            })
            .collect();
        Self::new(defs)
    }

    /// Loads a JSON array of `{label, full_name, definition}` objects.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let defs: Vec<EntityTypeDef> =
            serde_json::from_str(&raw).map_err(|e| CorpusError::TypeFile {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Self::new(defs)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|d| d.label == label)
    }

    pub fn get(&self, label: &str) -> Option<&EntityTypeDef> {
        self.0.iter().find(|d| d.label == label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|d| d.label.as_str())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EntityTypeDef> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'de> Deserialize<'de> for EntityTypeSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let defs = Vec::<EntityTypeDef>::deserialize(d)?;
        Self::new(defs).map_err(serde::de::Error::custom)
    }
}

/// Raw task sentences with optional gold annotations keyed by sentence id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskSet {
    pub sentences: Vec<Sentence>,
    pub gold: Option<BTreeMap<usize, Vec<EntityMention>>>,
}

impl TaskSet {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.sentences.iter().map(|s| s.text.clone()).collect()
    }

    /// Gold mentions whose label is outside `types`.
    pub fn unknown_gold_labels(&self, types: &EntityTypeSet) -> Vec<(usize, EntityMention)> {
        let mut out = Vec::new();
        if let Some(gold) = &self.gold {
            for (id, ms) in gold {
                for m in ms {
                    if !types.contains(&m.entity_label) {
                        out.push((*id, m.clone()));
                    }
                }
            }
        }
        out
    }

    /// Writes the set in the JSONL corpus format. Sentences without a gold
    /// entry are written without an `entities` field.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        for s in &self.sentences {
            let record = JsonlRecord {
                text: s.text.clone(),
                entities: self.gold.as_ref().and_then(|g| g.get(&s.id).cloned()),
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// A loaded corpus plus the recoverable problems met while reading it.
#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub task: TaskSet,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenJoin {
    /// Tokens joined with a single space.
    #[default]
    Spaced,
    /// Tokens concatenated (Chinese and other unsegmented scripts).
    Unspaced,
}

impl TokenJoin {
    fn separator(self) -> &'static str {
        match self {
            TokenJoin::Spaced => " ",
            TokenJoin::Unspaced => "",
        }
    }
}

/// Reads a token-per-line column file with the BIO tag in the last column.
///
/// `I-X` without a preceding `B-X`/`I-X` is treated as `B-X` and reported as a
/// warning. `-DOCSTART-` lines are skipped. Sentences where one surface form
/// carries two labels are dropped with a warning.
pub fn load_conll(
    path: &Path,
    column_separator: char,
    join: TokenJoin,
) -> Result<Loaded, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let sep = join.separator();
    let mut out = Loaded::default();
    let mut gold = BTreeMap::new();

    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<(usize, usize, String)> = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let mut start_line = 0;

    let mut flush = |tokens: &mut Vec<String>,
                     spans: &mut Vec<(usize, usize, String)>,
                     open: &mut Option<(usize, String)>,
                     start_line: usize,
                     out: &mut Loaded| {
        if let Some((start, label)) = open.take() {
            spans.push((start, tokens.len(), label));
        }
        if tokens.is_empty() {
            spans.clear();
            return;
        }
        let text = tokens.join(sep);
        let mentions: Vec<EntityMention> = spans
            .drain(..)
            .map(|(a, b, label)| EntityMention::new(tokens[a..b].join(sep), label))
            .collect();
        tokens.clear();
        let conflicts = conflicting_surfaces(&mentions);
        if !conflicts.is_empty() {
            out.warnings.push(format!(
                "{}:{start_line}: sentence dropped, conflicting labels for {conflicts:?}",
                path.display()
            ));
            return;
        }
        let id = out.task.sentences.len();
        let sentence = Sentence::new(id, &text);
        let (kept, _) = validate_mentions(&sentence.text, mentions, None);
        out.task.sentences.push(sentence);
        gold.insert(id, kept);
    };

    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut spans, &mut open, start_line, &mut out);
            continue;
        }
        let cols: Vec<&str> = if column_separator.is_whitespace() {
            line.split_whitespace().collect()
        } else {
            line.split(column_separator).map(str::trim).collect()
        };
        if cols.first() == Some(&"-DOCSTART-") {
            continue;
        }
        if cols.len() < 2 {
            return Err(CorpusError::Columns {
                path: path.to_path_buf(),
                line: lineno,
                found: cols.len(),
            });
        }
        if tokens.is_empty() {
            start_line = lineno;
        }
        let token = cols[0].to_string();
        let tag = *cols.last().unwrap();
        let pos = tokens.len();
        tokens.push(token);

        if tag == "O" {
            if let Some((start, label)) = open.take() {
                spans.push((start, pos, label));
            }
            continue;
        }
        let (prefix, label) = tag.split_once('-').ok_or_else(|| CorpusError::Tag {
            path: path.to_path_buf(),
            line: lineno,
            tag: tag.to_string(),
        })?;
        match prefix {
            "B" => {
                if let Some((start, l)) = open.take() {
                    spans.push((start, pos, l));
                }
                open = Some((pos, label.to_string()));
            }
            "I" => match &open {
                Some((_, l)) if l == label => {}
                _ => {
                    out.warnings.push(format!(
                        "{}:{lineno}: {tag} without a preceding B-{label}/I-{label}, treated as B-{label}",
                        path.display()
                    ));
                    if let Some((start, l)) = open.take() {
                        spans.push((start, pos, l));
                    }
                    open = Some((pos, label.to_string()));
                }
            },
            _ => {
                return Err(CorpusError::Tag {
                    path: path.to_path_buf(),
                    line: lineno,
                    tag: tag.to_string(),
                })
            }
        }
    }
    flush(&mut tokens, &mut spans, &mut open, start_line, &mut out);
    out.task.gold = Some(gold);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entities: Option<Vec<EntityMention>>,
}

/// Reads one `{"text", "entities"?}` object per line.
///
/// Records whose mentions break the substring rule, or that give one surface
/// form two labels, are skipped with a warning naming the offending mention.
/// Blank lines are ignored. `gold` is present when at least one record
/// carries `entities`.
pub fn load_jsonl(path: &Path) -> Result<Loaded, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Loaded::default();
    let mut gold = BTreeMap::new();
    let mut any_labeled = false;

    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            line: lineno,
            source,
        })?;
        let id = out.task.sentences.len();
        let sentence = Sentence::new(id, &rec.text);
        if sentence.text.is_empty() {
            out.warnings
                .push(format!("{}:{lineno}: empty text, record skipped", path.display()));
            continue;
        }
        if let Some(entities) = rec.entities {
            any_labeled = true;
            let (kept, problems) = validate_mentions(&sentence.text, entities, None);
            if !problems.is_empty() {
                let list: Vec<String> = problems.iter().map(ToString::to_string).collect();
                out.warnings.push(format!(
                    "{}:{lineno}: record rejected: {}",
                    path.display(),
                    list.join("; ")
                ));
                continue;
            }
            let conflicts = conflicting_surfaces(&kept);
            if !conflicts.is_empty() {
                out.warnings.push(format!(
                    "{}:{lineno}: record rejected, conflicting labels for {conflicts:?}",
                    path.display()
                ));
                continue;
            }
            gold.insert(id, kept);
        }
        out.task.sentences.push(sentence);
    }
    if any_labeled {
        out.task.gold = Some(gold);
    }
    Ok(out)
}
