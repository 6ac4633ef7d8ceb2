//! Prompt templates and chat-completion backends.
//!
//! Every completion is keyed by `sha256(model, temperature to 2 d.p., prompt)`
//! plus a draw index distinguishing repeated samples of the same prompt. A
//! replay tape maps those keys to recorded responses; the live backend
//! appends each response it receives, so any live run can be replayed
//! offline.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::corpus::{EntityMention, EntityTypeSet, LabeledExample};
use crate::http::{self, RetryPolicy};

pub const LLM_KEY_ENV: &str = "REVERSENER_LLM_KEY";

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("template placeholder {{{0}}} is unbound")]
    Unbound(String),
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("max_tokens must be positive")]
    MaxTokens,
    #[error("no replay entry for {hash} draw {draw}; prompt starts {preview:?}")]
    ReplayMiss {
        hash: String,
        draw: u32,
        preview: String,
    },
    #[error("chat completion failed: {0}")]
    Remote(String),
    #[error("replay tape {path}: {message}")]
    Tape { path: PathBuf, message: String },
    #[error("invalid LLM backend config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Vocabulary,
    Expansion,
    Recognition,
    /// Recognition without demonstrations; the vanilla baseline.
    ZeroShot,
}

pub const PLACEHOLDERS: &[&str] = &[
    "entity_type_set",
    "definitions",
    "vocab_block",
    "reference_sentence",
    "examples_block",
    "task_sentence",
    "words_per_type",
    "sentences_per_cluster",
    "structure_example",
    "language",
];

impl TemplateKind {
    pub fn required(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Vocabulary => &[
                "entity_type_set",
                "definitions",
                "words_per_type",
                "structure_example",
            ],
            TemplateKind::Expansion => &[
                "entity_type_set",
                "sentences_per_cluster",
                "language",
                "vocab_block",
                "structure_example",
                "reference_sentence",
            ],
            TemplateKind::Recognition => &[
                "language",
                "entity_type_set",
                "definitions",
                "examples_block",
                "task_sentence",
            ],
            TemplateKind::ZeroShot => &[
                "language",
                "entity_type_set",
                "definitions",
                "task_sentence",
            ],
        }
    }
}

const VOCABULARY_BODY: &str = "Here is an entity type set: {entity_type_set}.

Here are the explanations of each entity from the label set:
{definitions}

Please imagine a list of at least {words_per_type} diverse words for each entity type in the set. The output must be a JSON object, where keys are the entity types and values are lists of words. Here is the output JSON structure example you must follow:
{structure_example}";

const EXPANSION_BODY: &str = "Here is an entity label set: {entity_type_set}, do as follows:
    Make {sentences_per_cluster} {language} sentences with diverse styles and word orders.
    Each sentence must contain one, two, or three entities from the following words:
{vocab_block}

If your generated sentences include entities that may belong to a certain type of entity label set but are not shown in the word list, mark them as well in the output JSON.
Output format:
{structure_example}

Here is a sentence for reference. You can reference its style and content, but ensure the generated sentence covers different topics and scenarios
Reference Sentence: {reference_sentence}";

const RECOGNITION_BODY: &str = "Perform {language} NER task in the following entity type set: {entity_type_set}
Here are the explanations of each entity from the label set:
{definitions}
Output format: [{\"entity 1 text\": \"entity 1 type\"},{\"entity 2 text\": \"entity 2 type\"}]

{examples_block}

Test Input Sentence: {task_sentence} Output:";

const ZERO_SHOT_BODY: &str = "Perform {language} NER task in the following entity type set: {entity_type_set}
Here are the explanations of each entity from the label set:
{definitions}
Output format: [{\"entity 1 text\": \"entity 1 type\"},{\"entity 2 text\": \"entity 2 type\"}]

Test Input Sentence: {task_sentence} Output:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: String,
}

impl PromptTemplate {
    pub fn default_for(kind: TemplateKind) -> Self {
        let body = match kind {
            TemplateKind::Vocabulary => VOCABULARY_BODY,
            TemplateKind::Expansion => EXPANSION_BODY,
            TemplateKind::Recognition => RECOGNITION_BODY,
            TemplateKind::ZeroShot => ZERO_SHOT_BODY,
        };
        Self {
            kind,
            body: body.to_string(),
        }
    }
}

pub type Bindings = BTreeMap<&'static str, String>;

/// Substitutes `{placeholder}` occurrences in one pass. Braces that do not
/// enclose a known placeholder name (JSON examples) are left alone.
///
/// Fails when a placeholder required by the template kind is unbound or
/// empty, or when the body uses any placeholder that is unbound.
pub fn render(template: &PromptTemplate, bindings: &Bindings) -> Result<String, LlmError> {
    for name in template.kind.required() {
        if bindings.get(name).is_none_or(|v| v.trim().is_empty()) {
            return Err(LlmError::Unbound((*name).to_string()));
        }
    }
    let body = template.body.as_str();
    let mut out = String::with_capacity(body.len() * 2);
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            PLACEHOLDERS.contains(&name).then_some((name, close))
        });
        match hit {
            Some((name, close)) => {
                let value = bindings
                    .get(name)
                    .ok_or_else(|| LlmError::Unbound(name.to_string()))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// `[PER, ORG, LOC, MISC]`
pub fn type_set_block(types: &EntityTypeSet) -> String {
    format!("[{}]", types.labels().collect::<Vec<_>>().join(", "))
}

pub fn definitions_block(types: &EntityTypeSet) -> String {
    types
        .iter()
        .map(|t| {
            format!(
                "    {} means {}. Definition: {}",
                t.label, t.full_name, t.definition
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn vocabulary_structure_example(types: &EntityTypeSet) -> String {
    let rows: Vec<String> = types
        .labels()
        .map(|l| format!("    \"{l}\": [\"{l}_1\", \"{l}_2\", \"{l}_3\"]"))
        .collect();
    format!("{{\n{}\n}}", rows.join(",\n"))
}

pub fn expansion_structure_example(types: &EntityTypeSet) -> String {
    let rows: Vec<String> = types
        .labels()
        .map(|l| {
            format!("            {{\"entity_text\": \"the {l} entity\",\"entity_label\": \"{l}\"}}")
        })
        .collect();
    format!(
        "[\n    {{\n        \"text\": \"Your sentence here.\",\n        \"entities\": [\n{}\n        ]\n    }}\n]",
        rows.join(",\n")
    )
}

/// `[{"Marie Curie": "PER"}, {"Nobel Prize": "MISC"}]`
pub fn mention_list(mentions: &[EntityMention]) -> String {
    let items: Vec<String> = mentions
        .iter()
        .map(|m| {
            format!(
                "{{{}: {}}}",
                serde_json::to_string(&m.entity_text).expect("string serializes"),
                serde_json::to_string(&m.entity_label).expect("string serializes")
            )
        })
        .collect();
    format!("[{}]", items.join(", "))
}

pub fn examples_block(examples: &[&LabeledExample]) -> String {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "Example {}: Input sentence: {} Output: {}",
                i + 1,
                e.sentence.text,
                mention_list(&e.entities)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub model_name: String,
    pub max_tokens: u32,
    /// Which independent sample of this prompt is wanted. Repeated attempts
    /// at the same prompt use draws 0, 1, 2, ...
    #[serde(default)]
    pub draw: u32,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Temperature(self.temperature));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::MaxTokens);
        }
        Ok(())
    }

    pub fn key_hash(&self) -> String {
        replay_key(&self.model_name, self.temperature, &self.prompt)
    }
}

/// Model and sampling settings shared by every request a stage issues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            model_name: "gpt-4o-mini".into(),
            temperature: 0.8,
            max_tokens: 1024,
        }
    }
}

impl Sampling {
    pub fn request(&self, prompt: String, draw: u32) -> LlmRequest {
        LlmRequest {
            prompt,
            temperature: self.temperature,
            model_name: self.model_name.clone(),
            max_tokens: self.max_tokens,
            draw,
        }
    }
}

pub fn temperature_bucket(t: f64) -> String {
    format!("{t:.2}")
}

pub fn replay_key(model: &str, temperature: f64, prompt: &str) -> String {
    let material = serde_json::to_string(&(model, temperature_bucket(temperature), prompt))
        .expect("tuple serializes");
    hex::encode(Sha256::digest(material.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TapeRecord {
    pub key_hash: String,
    #[serde(default)]
    pub draw: u32,
    pub model: String,
    pub temperature: f64,
    pub prompt: String,
    pub response: String,
    pub timestamp: u64,
}

/// Append-only JSONL of recorded completions.
pub struct ReplayTape {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<(String, u32), String>>,
    writer: Mutex<()>,
}

impl ReplayTape {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(()),
        }
    }

    /// Loads `path` if it exists; later records win over earlier ones.
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let tape_err = |message: String| LlmError::Tape {
            path: path.to_path_buf(),
            message,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(|e| tape_err(e.to_string()))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: TapeRecord = serde_json::from_str(line)
                    .map_err(|e| tape_err(format!("line {}: {e}", i + 1)))?;
                entries.insert((rec.key_hash, rec.draw), rec.response);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn lookup(&self, req: &LlmRequest) -> Option<String> {
        self.entries
            .read()
            .unwrap()
            .get(&(req.key_hash(), req.draw))
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `response` for `req`, appending it to the backing file.
    pub fn record(&self, req: &LlmRequest, response: &str) -> Result<(), LlmError> {
        let rec = TapeRecord {
            key_hash: req.key_hash(),
            draw: req.draw,
            model: req.model_name.clone(),
            temperature: req.temperature,
            prompt: req.prompt.clone(),
            response: response.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let _guard = self.writer.lock().unwrap();
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| LlmError::Tape {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
        self.entries
            .write()
            .unwrap()
            .insert((rec.key_hash, rec.draw), rec.response);
        Ok(())
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError>;

    /// Successful completions served so far.
    fn invocations(&self) -> usize;

    /// Completions that needed a network round trip.
    fn network_calls(&self) -> usize {
        0
    }
}

/// Counts the completions one stage issues through a shared backend.
pub struct Tally<'a> {
    inner: &'a dyn LlmBackend,
    count: AtomicUsize,
}

impl<'a> Tally<'a> {
    pub fn new(inner: &'a dyn LlmBackend) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl LlmBackend for Tally<'_> {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let out = self.inner.complete(req)?;
        self.count.fetch_add(1, Ordering::SeqCst);
        Ok(out)
    }

    fn invocations(&self) -> usize {
        self.count()
    }

    fn network_calls(&self) -> usize {
        self.inner.network_calls()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    RemoteHttp,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmBackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    /// Replay backend: the tape to answer from. Remote backend: optional tape
    /// consulted before the network and appended to after it.
    pub replay_path: Option<PathBuf>,
    pub retry_limit: u32,
    pub timeout_s: f64,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Replay,
            endpoint: None,
            replay_path: None,
            retry_limit: 3,
            timeout_s: 120.0,
        }
    }
}

impl LlmBackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        match self.kind {
            BackendKind::RemoteHttp if self.endpoint.is_none() => {
                Err(LlmError::Config("remote-http requires an endpoint".into()))
            }
            BackendKind::Replay if self.replay_path.is_none() => {
                Err(LlmError::Config("replay requires a replay_path".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Replay or chat-completions backend.
pub struct LlmClient {
    kind: BackendKind,
    endpoint: Option<String>,
    tape: ReplayTape,
    http: Option<reqwest::blocking::Client>,
    policy: RetryPolicy,
    key: Option<String>,
    invocations: AtomicUsize,
    network: AtomicUsize,
}

impl LlmClient {
    pub fn new(cfg: &LlmBackendConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let tape = match (&cfg.kind, &cfg.replay_path) {
            (BackendKind::Replay, Some(p)) if !p.exists() => {
                return Err(LlmError::Tape {
                    path: p.clone(),
                    message: "replay tape does not exist".into(),
                })
            }
            (_, Some(p)) => ReplayTape::open(p)?,
            (_, None) => ReplayTape::in_memory(),
        };
        let http = match cfg.kind {
            BackendKind::RemoteHttp => Some(http::client(cfg.timeout_s).map_err(LlmError::Config)?),
            BackendKind::Replay => None,
        };
        Ok(Self {
            kind: cfg.kind,
            endpoint: cfg.endpoint.clone(),
            tape,
            http,
            policy: RetryPolicy {
                retry_limit: cfg.retry_limit,
                ..RetryPolicy::default()
            },
            key: std::env::var(LLM_KEY_ENV).ok(),
            invocations: AtomicUsize::new(0),
            network: AtomicUsize::new(0),
        })
    }

    pub fn with_retry_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Overrides the bearer token read from the environment.
    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.key = key;
        self
    }

    pub fn tape(&self) -> &ReplayTape {
        &self.tape
    }

    fn remote(&self, req: &LlmRequest) -> Result<String, LlmError> {
        let client = self.http.as_ref().expect("remote backend has a client");
        let endpoint = self.endpoint.as_deref().expect("validated");
        let body = json!({
            "model": req.model_name,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let reply = http::post_json(client, endpoint, self.key.as_deref(), &body, &self.policy)
            .map_err(LlmError::Remote)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                LlmError::Remote(format!(
                    "response has no choices[0].message.content: {}",
                    http::truncate(&reply.to_string(), 200)
                ))
            })
    }
}

impl LlmBackend for LlmClient {
    fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
        req.validate()?;
        if let Some(hit) = self.tape.lookup(req) {
            self.invocations.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        match self.kind {
            BackendKind::Replay => Err(LlmError::ReplayMiss {
                hash: req.key_hash(),
                draw: req.draw,
                preview: http::truncate(&req.prompt, 80),
            }),
            BackendKind::RemoteHttp => {
                let text = self.remote(req)?;
                self.network.fetch_add(1, Ordering::SeqCst);
                self.tape.record(req, &text)?;
                self.invocations.fetch_add(1, Ordering::SeqCst);
                Ok(text)
            }
        }
    }

    fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }

    fn network_calls(&self) -> usize {
        self.network.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;
    use crate::test_server;
    use std::time::Duration;

    fn req(prompt: &str, draw: u32) -> LlmRequest {
        LlmRequest {
            prompt: prompt.into(),
            temperature: 0.8,
            model_name: "m".into(),
            max_tokens: 1024,
            draw,
        }
    }

    fn recognition_bindings(examples: &str) -> Bindings {
        let types = EntityTypeSet::conll();
        let mut b = Bindings::new();
        b.insert("language", "English".into());
        b.insert("entity_type_set", type_set_block(&types));
        b.insert("definitions", definitions_block(&types));
        b.insert("examples_block", examples.into());
        b.insert(
            "task_sentence",
            "Lily and Mark collaborate at the World Health Organization in Geneva.".into(),
        );
        b
    }

    #[test]
    fn recognition_prompt_shape() {
        let ex: Vec<LabeledExample> = (0..5)
            .map(|i| LabeledExample {
                sentence: Sentence::new(i, "Marie Curie won the Nobel Prize."),
                entities: vec![
                    EntityMention::new("Marie Curie", "PER"),
                    EntityMention::new("Nobel Prize", "MISC"),
                ],
            })
            .collect();
        let refs: Vec<&LabeledExample> = ex.iter().collect();
        let block = examples_block(&refs);
        assert!(block.starts_with(
            "Example 1: Input sentence: Marie Curie won the Nobel Prize. Output: [{\"Marie Curie\": \"PER\"}, {\"Nobel Prize\": \"MISC\"}]"
        ));
        assert!(block.contains("\nExample 5: "));
        let tmpl = PromptTemplate::default_for(TemplateKind::Recognition);
        let p = render(&tmpl, &recognition_bindings(&block)).unwrap();
        assert!(p.starts_with(
            "Perform English NER task in the following entity type set: [PER, ORG, LOC, MISC]\nHere are the explanations of each entity from the label set:\n    PER means Person. Definition: Denotes individual people"
        ));
        assert!(p.contains("Output format: [{\"entity 1 text\": \"entity 1 type\"},{\"entity 2 text\": \"entity 2 type\"}]"));
        assert!(p.ends_with(
            "Test Input Sentence: Lily and Mark collaborate at the World Health Organization in Geneva. Output:"
        ));
        for name in PLACEHOLDERS {
            assert!(!p.contains(&format!("{{{name}}}")));
        }
    }

    #[test]
    fn empty_examples_block_is_unbound() {
        let tmpl = PromptTemplate::default_for(TemplateKind::Recognition);
        match render(&tmpl, &recognition_bindings("")) {
            Err(LlmError::Unbound(name)) => assert_eq!(name, "examples_block"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocabulary_prompt_has_structure_example() {
        let types = EntityTypeSet::from_labels("PER,ORG,LOC,MISC").unwrap();
        let mut b = Bindings::new();
        b.insert("entity_type_set", type_set_block(&types));
        b.insert("definitions", definitions_block(&types));
        b.insert("words_per_type", "6".into());
        b.insert("structure_example", vocabulary_structure_example(&types));
        let p = render(&PromptTemplate::default_for(TemplateKind::Vocabulary), &b).unwrap();
        assert!(p.contains("Please imagine a list of at least 6 diverse words for each entity type in the set."));
        assert!(p.ends_with(
            "Here is the output JSON structure example you must follow:\n{\n    \"PER\": [\"PER_1\", \"PER_2\", \"PER_3\"],\n    \"ORG\": [\"ORG_1\", \"ORG_2\", \"ORG_3\"],\n    \"LOC\": [\"LOC_1\", \"LOC_2\", \"LOC_3\"],\n    \"MISC\": [\"MISC_1\", \"MISC_2\", \"MISC_3\"]\n}"
        ));
    }

    #[test]
    fn values_are_not_rescanned() {
        let tmpl = PromptTemplate {
            kind: TemplateKind::ZeroShot,
            body: "{language}|{entity_type_set}|{definitions}|{task_sentence}|{not_a_placeholder}".into(),
        };
        let mut b = Bindings::new();
        b.insert("language", "{task_sentence}".into());
        b.insert("entity_type_set", "[X]".into());
        b.insert("definitions", "d".into());
        b.insert("task_sentence", "t".into());
        assert_eq!(
            render(&tmpl, &b).unwrap(),
            "{task_sentence}|[X]|d|t|{not_a_placeholder}"
        );
    }

    #[test]
    fn optional_placeholder_in_body_must_be_bound() {
        let tmpl = PromptTemplate {
            kind: TemplateKind::ZeroShot,
            body: "{language}{entity_type_set}{definitions}{task_sentence}{vocab_block}".into(),
        };
        let mut b = Bindings::new();
        for k in ["language", "entity_type_set", "definitions", "task_sentence"] {
            b.insert(k, "x".into());
        }
        assert!(matches!(render(&tmpl, &b), Err(LlmError::Unbound(n)) if n == "vocab_block"));
    }

    #[test]
    fn replay_hit_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tape.jsonl");
        ReplayTape::open(&path).unwrap().record(&req("p", 0), "[]").unwrap();
        let client = LlmClient::new(&LlmBackendConfig {
            kind: BackendKind::Replay,
            replay_path: Some(path),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(client.complete(&req("p", 0)).unwrap(), "[]");
        assert_eq!(client.invocations(), 1);
        let miss = client.complete(&req("another prompt", 0)).unwrap_err();
        match miss {
            LlmError::ReplayMiss { hash, preview, .. } => {
                assert_eq!(hash, req("another prompt", 0).key_hash());
                assert_eq!(preview, "another prompt");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(client.complete(&req("p", 1)).is_err());
        assert_eq!(client.invocations(), 1);
    }

    #[test]
    fn temperature_bucketing() {
        let a = replay_key("m", 0.8, "p");
        assert_eq!(a, replay_key("m", 0.800000001, "p"));
        assert_ne!(a, replay_key("m", 0.81, "p"));
        assert_ne!(a, replay_key("m2", 0.8, "p"));
        let mut r = req("p", 0);
        r.temperature = 2.5;
        assert!(matches!(r.validate(), Err(LlmError::Temperature(_))));
    }

    #[test]
    fn remote_retries_records_and_counts() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"[{\"Lily\":\"PER\"}]"}}]}"#;
        let server = test_server::serve(vec![(429, "{}".into()), (200, ok.into())]);
        let dir = tempfile::tempdir().unwrap();
        let tape = dir.path().join("tape.jsonl");
        let cfg = LlmBackendConfig {
            kind: BackendKind::RemoteHttp,
            endpoint: Some(format!("{}/v1/chat/completions", server.url)),
            replay_path: Some(tape.clone()),
            ..Default::default()
        };
        let fast = RetryPolicy {
            retry_limit: 2,
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(1),
        };
        let client = LlmClient::new(&cfg)
            .unwrap()
            .with_retry_policy(fast.clone())
            .with_api_key(Some("sk-test".into()));
        assert_eq!(client.complete(&req("p", 0)).unwrap(), "[{\"Lily\":\"PER\"}]");
        assert_eq!(client.invocations(), 1);
        assert_eq!(client.network_calls(), 1);
        {
            let reqs = server.requests.lock().unwrap();
            assert_eq!(reqs.len(), 2);
            assert_eq!(reqs[1].path, "/v1/chat/completions");
            assert_eq!(reqs[1].authorization.as_deref(), Some("Bearer sk-test"));
            assert_eq!(reqs[1].body["messages"][0]["role"], "user");
            assert_eq!(reqs[1].body["messages"][0]["content"], "p");
            assert_eq!(reqs[1].body["max_tokens"], 1024);
        }
        // A second client over the same tape is served without the network.
        let again = LlmClient::new(&cfg).unwrap().with_retry_policy(fast);
        assert_eq!(again.complete(&req("p", 0)).unwrap(), "[{\"Lily\":\"PER\"}]");
        assert_eq!(again.network_calls(), 0);
        assert_eq!(again.invocations(), 1);
        assert_eq!(server.requests.lock().unwrap().len(), 2);
        let replay = LlmClient::new(&LlmBackendConfig {
            kind: BackendKind::Replay,
            replay_path: Some(tape),
            ..Default::default()
        })
        .unwrap();
        assert!(replay.complete(&req("p", 0)).is_ok());
    }

    #[test]
    fn remote_exhaustion_is_fatal_and_uncounted() {
        let server = test_server::serve(vec![(500, "{}".into())]);
        let client = LlmClient::new(&LlmBackendConfig {
            kind: BackendKind::RemoteHttp,
            endpoint: Some(server.url.clone()),
            ..Default::default()
        })
        .unwrap()
        .with_retry_policy(RetryPolicy {
            retry_limit: 1,
            initial_backoff: Duration::from_millis(1),
            max_backoff: Duration::from_millis(1),
        });
        assert!(matches!(client.complete(&req("p", 0)), Err(LlmError::Remote(_))));
        assert_eq!(client.invocations(), 0);
        assert_eq!(server.requests.lock().unwrap().len(), 2);
    }

    #[test]
    fn config_requires_kind_fields() {
        assert!(LlmBackendConfig::default().validate().is_err());
        assert!(LlmBackendConfig {
            kind: BackendKind::RemoteHttp,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LlmClient::new(&LlmBackendConfig {
            kind: BackendKind::Replay,
            replay_path: Some("/nonexistent/tape.jsonl".into()),
            ..Default::default()
        })
        .is_err());
    }
}
