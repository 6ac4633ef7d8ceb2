//! Example-library construction by running NER backwards: the model first
//! invents entities for each type, then writes sentences around them that
//! imitate a feature sentence of the task set. Labels are known by
//! construction; anything the model returns that breaks the substring or
//! label rule is dropped, never repaired.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clusterer::{feature_sentences, kmedoids, ClusterError, Clustering, DEFAULT_MAX_ITER};
use crate::corpus::{
    conflicting_surfaces, normalize_text, validate_mentions, EntityMention, EntityTypeDef,
    EntityTypeSet, LabeledExample, Sentence, TaskSet,
};
use crate::embedder::{EmbedError, Embedder, EmbeddingVector};
use crate::extract::{first_json, mentions_from_array, JsonShape};
use crate::llm::{
    definitions_block, expansion_structure_example, render, type_set_block,
    vocabulary_structure_example, Bindings, LlmBackend, LlmError, PromptTemplate, Sampling, Tally,
    TemplateKind,
};

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("vocabulary generation failed after {attempts} attempts ({reason}); last response: {raw}")]
    Vocabulary {
        attempts: u32,
        reason: String,
        raw: String,
    },
    #[error("no valid examples for feature sentence {id} ({text:?}) after retry")]
    Expansion { id: usize, text: String },
    #[error("empty task set")]
    EmptyTask,
    #[error("library file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Generated entity strings per label. Lists are trimmed, de-duplicated and
/// non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EntityVocabulary {
    pub words: BTreeMap<String, Vec<String>>,
}

impl EntityVocabulary {
    /// One `        LABEL: a, b, c` line per type, in type-set order.
    pub fn block(&self, types: &EntityTypeSet) -> String {
        types
            .labels()
            .filter_map(|l| {
                self.words
                    .get(l)
                    .map(|ws| format!("        {l}: {}", ws.join(", ")))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub sampling: Sampling,
    /// Extra completions allowed when a reply cannot be used.
    pub parse_retry: u32,
    pub min_words_per_type: usize,
    pub language: String,
    pub vocabulary_template: PromptTemplate,
    pub expansion_template: PromptTemplate,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            sampling: Sampling::default(),
            parse_retry: 2,
            min_words_per_type: 1,
            language: "English".into(),
            vocabulary_template: PromptTemplate::default_for(TemplateKind::Vocabulary),
            expansion_template: PromptTemplate::default_for(TemplateKind::Expansion),
        }
    }
}

pub fn vocabulary_prompt(
    types: &EntityTypeSet,
    words_per_type: usize,
    opts: &GenerationOptions,
) -> Result<String, LlmError> {
    let mut b = Bindings::new();
    b.insert("entity_type_set", type_set_block(types));
    b.insert("definitions", definitions_block(types));
    b.insert("words_per_type", words_per_type.to_string());
    b.insert("structure_example", vocabulary_structure_example(types));
    b.insert("language", opts.language.clone());
    render(&opts.vocabulary_template, &b)
}

fn parse_vocabulary(
    raw: &str,
    types: &EntityTypeSet,
    min_words: usize,
) -> Result<EntityVocabulary, String> {
    let obj = first_json(raw, JsonShape::Object).ok_or("no JSON object in response")?;
    let obj = obj.as_object().expect("shape checked");
    for key in obj.keys() {
        if !types.contains(key) {
            debug!("vocabulary: ignoring unknown label {key:?}");
        }
    }
    let mut words = BTreeMap::new();
    let mut missing = Vec::new();
    for label in types.labels() {
        let mut list: Vec<String> = Vec::new();
        if let Some(Value::Array(items)) = obj.get(label) {
            for item in items {
                if let Some(w) = item.as_str().map(str::trim) {
                    if !w.is_empty() && !list.iter().any(|x| x == w) {
                        list.push(w.to_string());
                    }
                }
            }
        }
        if list.len() < min_words.max(1) {
            missing.push(label.to_string());
        } else {
            words.insert(label.to_string(), list);
        }
    }
    if missing.is_empty() {
        Ok(EntityVocabulary { words })
    } else {
        Err(format!("missing or short lists for {missing:?}"))
    }
}

/// Asks for an entity vocabulary covering every type, retrying up to
/// `opts.parse_retry` times on malformed or incomplete replies. Draws start
/// at `draw_base`.
pub fn generate_vocabulary(
    types: &EntityTypeSet,
    words_per_type: usize,
    llm: &dyn LlmBackend,
    opts: &GenerationOptions,
    draw_base: u32,
) -> Result<EntityVocabulary, LibraryError> {
    let prompt = vocabulary_prompt(types, words_per_type, opts)?;
    let mut last = (String::new(), String::new());
    for attempt in 0..=opts.parse_retry {
        let raw = llm.complete(&opts.sampling.request(prompt.clone(), draw_base + attempt))?;
        match parse_vocabulary(&raw, types, opts.min_words_per_type) {
            Ok(v) => return Ok(v),
            Err(reason) => {
                warn!("vocabulary attempt {attempt}: {reason}");
                last = (reason, raw);
            }
        }
    }
    Err(LibraryError::Vocabulary {
        attempts: opts.parse_retry + 1,
        reason: last.0,
        raw: last.1,
    })
}

pub fn expansion_prompt(
    vocab: &EntityVocabulary,
    feature: &Sentence,
    n: usize,
    types: &EntityTypeSet,
    opts: &GenerationOptions,
) -> Result<String, LlmError> {
    let mut b = Bindings::new();
    b.insert("entity_type_set", type_set_block(types));
    b.insert("sentences_per_cluster", n.to_string());
    b.insert("language", opts.language.clone());
    b.insert("vocab_block", vocab.block(types));
    b.insert("structure_example", expansion_structure_example(types));
    b.insert("reference_sentence", feature.text.clone());
    b.insert("definitions", definitions_block(types));
    render(&opts.expansion_template, &b)
}

/// Parses a `[{"text", "entities"}]` reply. Each element either becomes a
/// valid example or is dropped with a diagnostic.
pub fn parse_examples(raw: &str, types: &EntityTypeSet) -> (Vec<LabeledExample>, Vec<String>) {
    let mut out = Vec::new();
    let mut diags = Vec::new();
    let Some(Value::Array(items)) = first_json(raw, JsonShape::Array) else {
        diags.push("no JSON array in response".to_string());
        return (out, diags);
    };
    for (i, item) in items.iter().enumerate() {
        let Some(text) = item.get("text").and_then(Value::as_str) else {
            diags.push(format!("item {i}: no text field"));
            continue;
        };
        let text = normalize_text(text);
        if text.is_empty() {
            diags.push(format!("item {i}: empty text"));
            continue;
        }
        let mentions = match item.get("entities") {
            Some(Value::Array(ents)) => mentions_from_array(ents),
            _ => None,
        };
        let Some(mentions) = mentions else {
            diags.push(format!("item {i}: entities is not an array of objects"));
            continue;
        };
        let (kept, problems) = validate_mentions(&text, mentions, Some(types));
        if !problems.is_empty() {
            let list: Vec<String> = problems.iter().map(ToString::to_string).collect();
            diags.push(format!("item {i} dropped: {}", list.join("; ")));
            continue;
        }
        let conflicts = conflicting_surfaces(&kept);
        if !conflicts.is_empty() {
            diags.push(format!("item {i} dropped: conflicting labels for {conflicts:?}"));
            continue;
        }
        if kept.is_empty() {
            diags.push(format!("item {i} dropped: no entities"));
            continue;
        }
        out.push(LabeledExample {
            sentence: Sentence { id: 0, text },
            entities: kept,
        });
    }
    (out, diags)
}

#[derive(Debug, Clone, Default)]
pub struct Expansion {
    pub examples: Vec<LabeledExample>,
    pub diagnostics: Vec<String>,
}

/// Writes `n` labelled sentences around the vocabulary in the style of
/// `feature`. One retry completion is issued when fewer than `n` valid
/// examples come back; results are merged by text and capped at `n`.
pub fn expand_cluster(
    vocab: &EntityVocabulary,
    feature: &Sentence,
    n: usize,
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    opts: &GenerationOptions,
) -> Result<Expansion, LibraryError> {
    let prompt = expansion_prompt(vocab, feature, n, types, opts)?;
    let mut result = Expansion::default();
    for draw in 0..2 {
        let raw = llm.complete(&opts.sampling.request(prompt.clone(), draw))?;
        let (examples, diags) = parse_examples(&raw, types);
        result
            .diagnostics
            .extend(diags.into_iter().map(|d| format!("feature {}: {d}", feature.id)));
        for ex in examples {
            if result.examples.len() < n
                && !result.examples.iter().any(|e| e.sentence.text == ex.sentence.text)
            {
                result.examples.push(ex);
            }
        }
        if result.examples.len() >= n {
            break;
        }
    }
    if result.examples.is_empty() {
        return Err(LibraryError::Expansion {
            id: feature.id,
            text: feature.text.clone(),
        });
    }
    if result.examples.len() < n {
        result.diagnostics.push(format!(
            "feature {}: only {} of {n} examples survived validation",
            feature.id,
            result.examples.len()
        ));
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub cluster: usize,
    pub feature_sentence_id: usize,
}

/// Generated demonstrations with their cluster of origin and embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleLibrary {
    pub examples: Vec<LabeledExample>,
    pub provenance: Vec<Provenance>,
    pub embeddings: Vec<EmbeddingVector>,
}

impl ExampleLibrary {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.sentence.text.clone()).collect()
    }

    /// Mentions breaking the substring or label rule. Empty for any library
    /// produced by [`build_library`].
    pub fn violations(&self, types: &EntityTypeSet) -> Vec<(usize, EntityMention)> {
        let mut out = Vec::new();
        for (i, e) in self.examples.iter().enumerate() {
            for m in &e.entities {
                if !e.sentence.text.contains(&m.entity_text) || !types.contains(&m.entity_label) {
                    out.push((i, m.clone()));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub cluster: usize,
    pub sentence_id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryMeta {
    pub seed: u64,
    pub config_hash: String,
    pub embedding_provider: String,
    pub llm_model: String,
    pub clusters: usize,
    pub per_cluster: usize,
    pub types: Vec<EntityTypeDef>,
    pub feature_sentences: Vec<FeatureRecord>,
    pub provenance: Vec<Provenance>,
    #[serde(default)]
    pub embeddings: Vec<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub text: String,
    pub entities: Vec<EntityMention>,
}

/// On-disk form: `{"meta": {...}, "examples": [{"text", "entities"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryFile {
    pub meta: LibraryMeta,
    pub examples: Vec<ExampleRecord>,
}

impl LibraryFile {
    pub fn from_library(library: &ExampleLibrary, mut meta: LibraryMeta) -> Self {
        meta.provenance = library.provenance.clone();
        meta.embeddings = library.embeddings.clone();
        Self {
            meta,
            examples: library
                .examples
                .iter()
                .map(|e| ExampleRecord {
                    text: e.sentence.text.clone(),
                    entities: e.entities.clone(),
                })
                .collect(),
        }
    }

    /// Validates the schema invariants and rebuilds the library. Example ids
    /// are their positions.
    pub fn to_library(&self) -> Result<ExampleLibrary, String> {
        let n = self.examples.len();
        if self.meta.provenance.len() != n {
            return Err(format!(
                "{} provenance entries for {n} examples",
                self.meta.provenance.len()
            ));
        }
        if !self.meta.embeddings.is_empty() && self.meta.embeddings.len() != n {
            return Err(format!(
                "{} embeddings for {n} examples",
                self.meta.embeddings.len()
            ));
        }
        let types = EntityTypeSet::new(self.meta.types.clone()).map_err(|e| e.to_string())?;
        let mut examples = Vec::with_capacity(n);
        for (i, rec) in self.examples.iter().enumerate() {
            let text = normalize_text(&rec.text);
            if text.is_empty() {
                return Err(format!("example {i}: empty text"));
            }
            let (kept, problems) = validate_mentions(&text, rec.entities.clone(), Some(&types));
            if let Some(p) = problems.first() {
                return Err(format!("example {i}: {p}"));
            }
            examples.push(LabeledExample {
                sentence: Sentence { id: i, text },
                entities: kept,
            });
        }
        Ok(ExampleLibrary {
            examples,
            provenance: self.meta.provenance.clone(),
            embeddings: self.meta.embeddings.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LibraryError> {
        let mut body = serde_json::to_string_pretty(self).expect("library serializes");
        body.push('\n');
        fs::write(path, body).map_err(|e| LibraryError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, LibraryError> {
        let file_err = |message: String| LibraryError::File {
            path: path.to_path_buf(),
            message,
        };
        let raw = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let file: Self = serde_json::from_str(&raw).map_err(|e| file_err(e.to_string()))?;
        file.to_library().map_err(file_err)?;
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub words_per_type: usize,
    /// One vocabulary completion per cluster (true) or one for the run.
    pub vocab_per_cluster: bool,
    /// Concurrent cluster expansions.
    pub max_in_flight: usize,
    /// Offset added to every vocabulary draw, so repeated builds over the same
    /// prompt can ask for fresh samples.
    pub vocabulary_draw_base: u32,
    pub generation: GenerationOptions,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            clusters: 10,
            per_cluster: 3,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            words_per_type: 6,
            vocab_per_cluster: true,
            max_in_flight: 4,
            vocabulary_draw_base: 0,
            generation: GenerationOptions::default(),
        }
    }
}

/// Everything a library build produced, for manifests and audits.
#[derive(Debug, Clone)]
pub struct LibraryBuild {
    pub library: ExampleLibrary,
    pub clustering: Clustering,
    pub features: Vec<Sentence>,
    pub vocabulary_calls: usize,
    pub expansion_calls: usize,
    pub diagnostics: Vec<String>,
}

struct ClusterOutput {
    expansion: Expansion,
}

/// Embeds the task, picks `clusters` feature sentences with k-Medoids,
/// generates vocabulary and examples per cluster, and embeds the result.
pub fn build_library(
    task: &TaskSet,
    cfg: &LibraryConfig,
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
) -> Result<LibraryBuild, LibraryError> {
    if task.is_empty() {
        return Err(LibraryError::EmptyTask);
    }
    let vectors = embedder.embed_batch(&task.texts())?;
    let clustering = kmedoids(&vectors, cfg.clusters, cfg.seed, cfg.max_iter)?;
    let features = feature_sentences(&clustering, task);

    let vocab_tally = Tally::new(llm);
    let expand_tally = Tally::new(llm);
    let gen = &cfg.generation;
    let draws_per_vocab = gen.parse_retry + 1;

    let shared_vocab = if cfg.vocab_per_cluster {
        None
    } else {
        Some(generate_vocabulary(
            types,
            cfg.words_per_type,
            &vocab_tally,
            gen,
            cfg.vocabulary_draw_base,
        )?)
    };

    let run_cluster = |c: usize| -> Result<ClusterOutput, LibraryError> {
        let vocab = match &shared_vocab {
            Some(v) => v.clone(),
            None => generate_vocabulary(
                types,
                cfg.words_per_type,
                &vocab_tally,
                gen,
                cfg.vocabulary_draw_base + c as u32 * draws_per_vocab,
            )?,
        };
        let expansion = expand_cluster(&vocab, &features[c], cfg.per_cluster, types, &expand_tally, gen)?;
        Ok(ClusterOutput { expansion })
    };

    let slots: Vec<Mutex<Option<Result<ClusterOutput, LibraryError>>>> =
        features.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    thread::scope(|s| {
        for _ in 0..cfg.max_in_flight.max(1).min(features.len()) {
            s.spawn(|| loop {
                let c = {
                    let mut n = next.lock().unwrap();
                    let c = *n;
                    *n += 1;
                    c
                };
                if c >= features.len() {
                    break;
                }
                let r = run_cluster(c);
                let failed = r.is_err();
                *slots[c].lock().unwrap() = Some(r);
                if failed {
                    *next.lock().unwrap() = features.len();
                }
            });
        }
    });

    let mut examples = Vec::new();
    let mut provenance = Vec::new();
    let mut diagnostics = Vec::new();
    for (c, slot) in slots.into_iter().enumerate() {
        let Some(out) = slot.into_inner().unwrap() else {
            continue;
        };
        let out = out?;
        diagnostics.extend(out.expansion.diagnostics);
        for mut ex in out.expansion.examples {
            ex.sentence.id = examples.len();
            examples.push(ex);
            provenance.push(Provenance {
                cluster: c,
                feature_sentence_id: features[c].id,
            });
        }
    }
    let texts: Vec<String> = examples.iter().map(|e| e.sentence.text.clone()).collect();
    let embeddings = embedder.embed_batch(&texts)?;

    Ok(LibraryBuild {
        library: ExampleLibrary {
            examples,
            provenance,
            embeddings,
        },
        clustering,
        features,
        vocabulary_calls: vocab_tally.count(),
        expansion_calls: expand_tally.count(),
        diagnostics,
    })
}

/// Serves canned replies chosen by a closure; counts like a real backend.
#[cfg(test)]
pub(crate) mod scripted {
    use super::*;
    use crate::llm::LlmRequest;
    use std::sync::atomic::{AtomicUsize, Ordering};

    pub struct Scripted<F> {
        pub reply: F,
        pub calls: AtomicUsize,
        pub log: Mutex<Vec<LlmRequest>>,
    }

    impl<F: Fn(&LlmRequest) -> String + Send + Sync> Scripted<F> {
        pub fn new(reply: F) -> Self {
            Self {
                reply,
                calls: AtomicUsize::new(0),
                log: Mutex::new(Vec::new()),
            }
        }
    }

    impl<F: Fn(&LlmRequest) -> String + Send + Sync> LlmBackend for Scripted<F> {
        fn complete(&self, req: &LlmRequest) -> Result<String, LlmError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.log.lock().unwrap().push(req.clone());
            Ok((self.reply)(req))
        }

        fn invocations(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::scripted::Scripted;
    use super::*;
    use crate::embedder::HashingEmbedder;

    fn types3() -> EntityTypeSet {
        EntityTypeSet::from_labels("PER,LOC,ORG").unwrap()
    }

    const VOCAB: &str = r#"{"PER":["John Smith","Marie Curie","Albert Einstein"],"LOC":["Paris","Amazon Rainforest","Mount Everest"],"ORG":["United Nations","Red Cross","NASA"]}"#;

    #[test]
    fn vocabulary_three_types() {
        let llm = Scripted::new(|_| VOCAB.to_string());
        let v = generate_vocabulary(&types3(), 6, &llm, &GenerationOptions::default(), 0).unwrap();
        assert_eq!(v.words.len(), 3);
        assert_eq!(v.words["PER"], vec!["John Smith", "Marie Curie", "Albert Einstein"]);
        assert_eq!(llm.invocations(), 1);
        let block = v.block(&types3());
        assert_eq!(
            block.lines().next().unwrap(),
            "        PER: John Smith, Marie Curie, Albert Einstein"
        );
    }

    #[test]
    fn vocabulary_in_code_fences() {
        // Shape of a real chat-model reply.
        let raw = "```json\n{\n    \"PER\": [\"Ada Lovelace\", \"Ada Lovelace \", \"Alan Turing\"],\n    \"LOC\": [\"Kyoto\"],\n    \"ORG\": [\"UNESCO\"],\n    \"MISC\": [\"Esperanto\"]\n}\n```";
        let llm = Scripted::new(|_| raw.to_string());
        let v = generate_vocabulary(&types3(), 6, &llm, &GenerationOptions::default(), 0).unwrap();
        assert_eq!(v.words["PER"], vec!["Ada Lovelace", "Alan Turing"]);
        assert!(!v.words.contains_key("MISC"));
    }

    #[test]
    fn vocabulary_missing_key_retries_once() {
        let types = EntityTypeSet::conll();
        let llm = Scripted::new(|r: &crate::llm::LlmRequest| {
            if r.draw == 0 {
                r#"{"PER":["a"],"ORG":["b"],"LOC":["c"]}"#.to_string()
            } else {
                r#"{"PER":["a"],"ORG":["b"],"LOC":["c"],"MISC":["d"]}"#.to_string()
            }
        });
        let v = generate_vocabulary(&types, 6, &llm, &GenerationOptions::default(), 0).unwrap();
        assert_eq!(v.words["MISC"], vec!["d"]);
        assert_eq!(llm.invocations(), 2);
        let draws: Vec<u32> = llm.log.lock().unwrap().iter().map(|r| r.draw).collect();
        assert_eq!(draws, vec![0, 1]);
    }

    #[test]
    fn vocabulary_persistent_garbage_is_fatal() {
        let llm = Scripted::new(|_| "I cannot help with that.".to_string());
        match generate_vocabulary(&types3(), 6, &llm, &GenerationOptions::default(), 0) {
            Err(LibraryError::Vocabulary { attempts, raw, .. }) => {
                assert_eq!(attempts, 3);
                assert_eq!(raw, "I cannot help with that.");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(llm.invocations(), 3);
    }

    fn vocab() -> EntityVocabulary {
        serde_json::from_str::<BTreeMap<String, Vec<String>>>(VOCAB)
            .map(|words| EntityVocabulary { words })
            .unwrap()
    }

    #[test]
    fn expansion_prompt_shape() {
        let p = expansion_prompt(
            &vocab(),
            &Sentence::new(4, "John and Sarah work for UNICEF in New York."),
            3,
            &types3(),
            &GenerationOptions::default(),
        )
        .unwrap();
        assert!(p.starts_with("Here is an entity label set: [PER, LOC, ORG], do as follows:\n    Make 3 English sentences with diverse styles and word orders.\n"));
        assert!(p.contains("        LOC: Paris, Amazon Rainforest, Mount Everest\n"));
        assert!(p.contains("{\"entity_text\": \"the ORG entity\",\"entity_label\": \"ORG\"}"));
        assert!(p.ends_with("Reference Sentence: John and Sarah work for UNICEF in New York."));
    }

    #[test]
    fn expansion_keeps_valid_examples() {
        let reply = r#"[{"text":"John Smith and Marie Curie work for NASA in Paris.","entities":[
            {"entity_text":"John Smith","entity_label":"PER"},
            {"entity_text":"Marie Curie","entity_label":"PER"},
            {"entity_text":"NASA","entity_label":"ORG"},
            {"entity_text":"Paris","entity_label":"LOC"}]}]"#;
        let llm = Scripted::new(|_| reply.to_string());
        let feature = Sentence::new(0, "John and Sarah work for UNICEF in New York.");
        let out =
            expand_cluster(&vocab(), &feature, 1, &types3(), &llm, &GenerationOptions::default())
                .unwrap();
        assert_eq!(out.examples.len(), 1);
        assert_eq!(out.examples[0].entities.len(), 4);
        assert_eq!(llm.invocations(), 1);
    }

    #[test]
    fn expansion_drops_invalid_and_retries_once() {
        let reply = r#"[
            {"text":"Marie Curie lectured in Paris.","entities":[{"entity_text":"Marie Curie","entity_label":"PER"},{"entity_text":"Berlin","entity_label":"LOC"}]},
            {"text":"NASA launched on May 5.","entities":[{"entity_text":"NASA","entity_label":"ORG"},{"entity_text":"May 5","entity_label":"DATE"}]},
            {"text":"The Red Cross met in Paris.","entities":[{"entity_text":"Red Cross","entity_label":"ORG"},{"entity_text":"Paris","entity_label":"LOC"}]}
        ]"#;
        let llm = Scripted::new(|_| reply.to_string());
        let feature = Sentence::new(7, "He died in Hollywood, California.");
        let out =
            expand_cluster(&vocab(), &feature, 3, &types3(), &llm, &GenerationOptions::default())
                .unwrap();
        assert_eq!(out.examples.len(), 1);
        assert_eq!(out.examples[0].sentence.text, "The Red Cross met in Paris.");
        assert_eq!(llm.invocations(), 2);
        assert!(out.diagnostics.iter().any(|d| d.contains("Berlin")));
        assert!(out.diagnostics.iter().any(|d| d.contains("DATE")));
    }

    #[test]
    fn expansion_with_nothing_valid_is_fatal() {
        let llm = Scripted::new(|_| "[]".to_string());
        let feature = Sentence::new(7, "He died in Hollywood, California.");
        match expand_cluster(&vocab(), &feature, 3, &types3(), &llm, &GenerationOptions::default()) {
            Err(LibraryError::Expansion { id, text }) => {
                assert_eq!(id, 7);
                assert_eq!(text, feature.text);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn toy_task(n: usize) -> TaskSet {
        let sents = (0..n)
            .map(|i| Sentence::new(i, &format!("Sentence number {i} about Paris and NASA.")))
            .collect();
        TaskSet {
            sentences: sents,
            gold: None,
        }
    }

    fn scripted_library_backend() -> Scripted<impl Fn(&crate::llm::LlmRequest) -> String> {
        Scripted::new(|r: &crate::llm::LlmRequest| {
            if r.prompt.starts_with("Here is an entity type set") {
                VOCAB.to_string()
            } else {
                let reference = r.prompt.rsplit("Reference Sentence: ").next().unwrap();
                let n: usize = reference
                    .split_whitespace()
                    .nth(2)
                    .and_then(|t| t.parse().ok())
                    .unwrap_or(0);
                let items: Vec<String> = (0..3)
                    .map(|j| {
                        format!(
                            r#"{{"text":"Marie Curie visited Paris ({n}.{j}).","entities":[{{"entity_text":"Marie Curie","entity_label":"PER"}},{{"entity_text":"Paris","entity_label":"LOC"}}]}}"#
                        )
                    })
                    .collect();
                format!("[{}]", items.join(","))
            }
        })
    }

    #[test]
    fn build_sizes_and_accounting() {
        let task = toy_task(20);
        let emb = HashingEmbedder::new(32);
        for (vocab_per_cluster, vocab_calls) in [(true, 10), (false, 1)] {
            let llm = scripted_library_backend();
            let cfg = LibraryConfig {
                vocab_per_cluster,
                ..Default::default()
            };
            let b = build_library(&task, &cfg, &types3(), &llm, &emb).unwrap();
            assert_eq!(b.library.len(), 30);
            assert_eq!(b.features.len(), 10);
            assert_eq!(b.vocabulary_calls, vocab_calls);
            assert_eq!(b.expansion_calls, 10);
            assert_eq!(b.library.embeddings.len(), 30);
            assert!(b.library.violations(&types3()).is_empty());
            for (i, p) in b.library.provenance.iter().enumerate() {
                assert_eq!(p.cluster, i / 3);
                assert_eq!(p.feature_sentence_id, b.clustering.medoid_ids[p.cluster]);
            }
        }
    }

    #[test]
    fn build_single_sentence_reduces_to_itself() {
        let task = toy_task(1);
        let llm = scripted_library_backend();
        let cfg = LibraryConfig {
            clusters: 1,
            ..Default::default()
        };
        let b = build_library(&task, &cfg, &types3(), &llm, &HashingEmbedder::new(32)).unwrap();
        assert_eq!(b.features, task.sentences);
        assert_eq!(b.library.len(), 3);
    }

    #[test]
    fn build_rejects_too_many_clusters() {
        let llm = scripted_library_backend();
        let cfg = LibraryConfig {
            clusters: 5,
            ..Default::default()
        };
        assert!(matches!(
            build_library(&toy_task(3), &cfg, &types3(), &llm, &HashingEmbedder::new(8)),
            Err(LibraryError::Cluster(ClusterError::TooManyClusters { k: 5, n: 3 }))
        ));
        assert!(matches!(
            build_library(&TaskSet::default(), &cfg, &types3(), &llm, &HashingEmbedder::new(8)),
            Err(LibraryError::EmptyTask)
        ));
    }

    #[test]
    fn library_file_round_trip() {
        let task = toy_task(6);
        let llm = scripted_library_backend();
        let cfg = LibraryConfig {
            clusters: 2,
            per_cluster: 2,
            ..Default::default()
        };
        let types = types3();
        let b = build_library(&task, &cfg, &types, &llm, &HashingEmbedder::new(16)).unwrap();
        let meta = LibraryMeta {
            seed: 0,
            config_hash: "h".into(),
            embedding_provider: "hashing-fallback/d16".into(),
            llm_model: "m".into(),
            clusters: 2,
            per_cluster: 2,
            types: types.iter().cloned().collect(),
            feature_sentences: vec![],
            provenance: vec![],
            embeddings: vec![],
        };
        let file = LibraryFile::from_library(&b.library, meta);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.json");
        file.save(&path).unwrap();
        let back = LibraryFile::load(&path).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_library().unwrap(), b.library);
    }

    #[test]
    fn library_file_schema_violations() {
        let raw = r#"{"meta":{"seed":0,"config_hash":"","embedding_provider":"","llm_model":"","clusters":1,"per_cluster":1,
            "types":[{"label":"PER","full_name":"Person","definition":"x"}],"feature_sentences":[],
            "provenance":[{"cluster":0,"feature_sentence_id":0}]},
            "examples":[{"text":"Bob ran.","entities":[{"entity_text":"Alice","entity_label":"PER"}]}]}"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.json");
        fs::write(&path, raw).unwrap();
        assert!(matches!(LibraryFile::load(&path), Err(LibraryError::File { .. })));
    }
}
