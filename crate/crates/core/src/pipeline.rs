//! End-to-end orchestration: configuration, stage sequencing, persistence
//! and invocation accounting. The CLI is a thin layer over this module.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    load_conll, load_jsonl, EntityMention, EntityTypeSet, Loaded, Sentence, TaskSet, TokenJoin,
};
use crate::embedder::{self, Embedder, EmbeddingProviderConfig, EmbeddingVector};
use crate::evaluator::{library_quality, micro_f1, EvaluationReport, LibraryQualityReport};
use crate::librarian::{
    build_library, ExampleLibrary, FeatureRecord, GenerationOptions, LibraryBuild, LibraryConfig,
    LibraryFile, LibraryMeta,
};
use crate::llm::{BackendKind, LlmBackend, LlmBackendConfig, LlmClient, Sampling, Tally};
use crate::recognizer::{recognize_all, InferenceRecord, RecognitionOptions, ScMode};
use crate::selector::{select_top_k, similarity_matrix};

pub const LIBRARY_FILE: &str = "library.json";
pub const BUILD_MANIFEST_FILE: &str = "build_manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RECOGNIZE_MANIFEST_FILE: &str = "recognize_manifest.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const ISOLATED_MANIFEST_FILE: &str = "isolated_manifest.json";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Corpus,
    Embedding,
    Library,
    Selection,
    Recognition,
    Evaluation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Corpus => "corpus",
            Stage::Embedding => "embedding",
            Stage::Library => "build-library",
            Stage::Selection => "selection",
            Stage::Recognition => "recognize",
            Stage::Evaluation => "evaluate",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait At<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T, E: Into<Box<dyn std::error::Error + Send + Sync>>> At<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| PipelineError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    #[default]
    Conll,
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "conll" => Ok(Self::Conll),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

/// Everything a run depends on. Loaded from a JSON document whose missing
/// fields take these defaults; CLI flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub format: CorpusFormat,
    pub column_separator: char,
    pub token_join: TokenJoin,
    /// `conll`, a comma-separated label list, or a path to a JSON file of
    /// type definitions.
    pub types: String,
    pub clusters: usize,
    pub per_cluster: usize,
    pub top_k: usize,
    pub sc: ScMode,
    pub attempts: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_iter: usize,
    pub words_per_type: usize,
    pub vocab_per_cluster: bool,
    pub parse_retry: u32,
    pub language: String,
    pub model_name: String,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub llm: LlmBackendConfig,
    pub embedding: EmbeddingProviderConfig,
    pub out: PathBuf,
    pub audit: bool,
    /// Sweep grid and repetitions.
    pub sweep_clusters: Vec<usize>,
    pub sweep_per_cluster: Vec<usize>,
    pub sweep_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampling = Sampling::default();
        Self {
            corpus: None,
            format: CorpusFormat::Conll,
            column_separator: ' ',
            token_join: TokenJoin::Spaced,
            types: "conll".into(),
            clusters: 10,
            per_cluster: 3,
            top_k: 5,
            sc: ScMode::Single,
            attempts: 5,
            temperature: sampling.temperature,
            seed: 0,
            max_iter: crate::clusterer::DEFAULT_MAX_ITER,
            words_per_type: 6,
            vocab_per_cluster: true,
            parse_retry: 2,
            language: "English".into(),
            model_name: sampling.model_name,
            max_tokens: sampling.max_tokens,
            max_in_flight: 4,
            llm: LlmBackendConfig::default(),
            embedding: EmbeddingProviderConfig::default(),
            out: PathBuf::from("out"),
            audit: false,
            sweep_clusters: vec![5, 10, 15],
            sweep_per_cluster: vec![1, 3, 5],
            sweep_repeats: 3,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).at(Stage::Config)?;
        serde_json::from_str(&raw)
            .map_err(|e| format!("{}: {e}", path.display()))
            .at(Stage::Config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(m.to_string()).at(Stage::Config);
        if self.clusters == 0 {
            return bad("clusters must be at least 1");
        }
        if self.per_cluster == 0 {
            return bad("per_cluster must be at least 1");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.attempts == 0 {
            return bad("attempts must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        self.llm.validate().at(Stage::Config)?;
        self.embedding.validate().at(Stage::Config)?;
        Ok(())
    }

    /// Attempts actually issued per sentence.
    pub fn effective_attempts(&self) -> usize {
        self.recognition_options().effective_attempts()
    }

    /// Hash of the settings that determine outputs. Paths, endpoints and
    /// output switches are excluded so relocated runs hash identically.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.corpus = None;
        c.out = PathBuf::new();
        c.audit = false;
        c.llm.endpoint = None;
        c.llm.replay_path = None;
        c.embedding.endpoint = None;
        c.embedding.cache_path = None;
        c.max_in_flight = 0;
        c.embedding.max_in_flight = 0;
        c.sweep_clusters.clear();
        c.sweep_per_cluster.clear();
        c.sweep_repeats = 0;
        let body = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(body.as_bytes()))
    }

    pub fn sampling(&self) -> Sampling {
        Sampling {
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn entity_types(&self) -> Result<EntityTypeSet> {
        let spec = self.types.trim();
        let path = Path::new(spec);
        if spec.eq_ignore_ascii_case("conll") {
            Ok(EntityTypeSet::conll())
        } else if spec.ends_with(".json") || path.is_file() {
            EntityTypeSet::load(path).at(Stage::Config)
        } else {
            EntityTypeSet::from_labels(spec).at(Stage::Config)
        }
    }

    pub fn load_corpus(&self) -> Result<Loaded> {
        let path = self
            .corpus
            .as_deref()
            .ok_or("no corpus given (--corpus)")
            .at(Stage::Corpus)?;
        let loaded = match self.format {
            CorpusFormat::Conll => load_conll(path, self.column_separator, self.token_join),
            CorpusFormat::Jsonl => load_jsonl(path),
        }
        .at(Stage::Corpus)?;
        for w in &loaded.warnings {
            log::warn!("{w}");
        }
        Ok(loaded)
    }

    pub fn library_config(&self) -> LibraryConfig {
        LibraryConfig {
            clusters: self.clusters,
            per_cluster: self.per_cluster,
            seed: self.seed,
            max_iter: self.max_iter,
            words_per_type: self.words_per_type,
            vocab_per_cluster: self.vocab_per_cluster,
            max_in_flight: self.max_in_flight,
            vocabulary_draw_base: 0,
            generation: GenerationOptions {
                sampling: self.sampling(),
                parse_retry: self.parse_retry,
                language: self.language.clone(),
                ..GenerationOptions::default()
            },
        }
    }

    pub fn recognition_options(&self) -> RecognitionOptions {
        RecognitionOptions {
            sampling: self.sampling(),
            language: self.language.clone(),
            top_k: self.top_k,
            mode: self.sc,
            attempts: self.attempts,
            max_in_flight: self.max_in_flight,
            ..RecognitionOptions::default()
        }
    }

    pub fn llm_client(&self) -> Result<LlmClient> {
        LlmClient::new(&self.llm).at(Stage::Config)
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>> {
        embedder::from_config(&self.embedding).at(Stage::Config)
    }
}

/// Completion counts per stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub vocabulary: usize,
    pub expansion: usize,
    pub recognition: usize,
    pub total: usize,
}

impl Ledger {
    fn sum(&mut self) {
        self.total = self.vocabulary + self.expansion + self.recognition;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster: usize,
    pub feature_sentence_id: usize,
    pub feature_text: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub config_hash: String,
    pub seed: u64,
    pub embedding_provider: String,
    pub llm_model: String,
    pub temperature: f64,
    pub clusters: usize,
    pub per_cluster: usize,
    pub vocab_per_cluster: bool,
    pub library_size: usize,
    pub kmedoids_objective: f64,
    pub kmedoids_iterations: usize,
    pub kmedoids_converged: bool,
    pub cluster_map: Vec<ClusterRecord>,
    pub invocations: Ledger,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizeManifest {
    pub config_hash: String,
    pub library_config_hash: String,
    pub sc: ScMode,
    pub attempts: usize,
    pub top_k: usize,
    pub sentences: usize,
    pub flagged: Vec<usize>,
    pub invocations: Ledger,
}

/// Combined scoring output written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub evaluation: EvaluationReport,
    pub library: Option<LibraryQualityReport>,
}

impl Report {
    pub fn text(&self) -> String {
        let mut out = self.evaluation.table();
        if let Some(lib) = &self.library {
            out.push_str(&format!("\nAHS {:.4}\n", lib.ahs));
            for (label, edr) in &lib.diversity.edr {
                out.push_str(&format!(
                    "EDR {label:<6}{edr:>8.4}  (library ED {:.4}, task ED {:.4})\n",
                    lib.diversity.ed_library[label], lib.diversity.ed_task[label]
                ));
            }
            for d in &lib.diversity.diagnostics {
                out.push_str(&format!("note: {d}\n"));
            }
            out.push_str(&format!("library rule violations {}\n", lib.violations));
        }
        out
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value).expect("value serializes");
    body.push('\n');
    fs::write(path, body)
        .map_err(|e| format!("{}: {e}", path.display()))
        .at(Stage::Output)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))
        .at(Stage::Output)
}

fn embed_texts(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    embedder.embed_batch(texts).at(Stage::Embedding)
}

/// A built library together with its file form and manifest.
pub struct BuiltLibrary {
    pub build: LibraryBuild,
    pub file: LibraryFile,
    pub manifest: BuildManifest,
}

pub fn build_stage(
    cfg: &RunConfig,
    task: &TaskSet,
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
) -> Result<BuiltLibrary> {
    let build = build_library(task, &cfg.library_config(), types, llm, embedder).at(Stage::Library)?;
    for d in &build.diagnostics {
        log::warn!("{d}");
    }
    let config_hash = cfg.config_hash();
    let meta = LibraryMeta {
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        embedding_provider: embedder.provider_id(),
        llm_model: cfg.model_name.clone(),
        clusters: cfg.clusters,
        per_cluster: cfg.per_cluster,
        types: types.iter().cloned().collect(),
        feature_sentences: build
            .features
            .iter()
            .enumerate()
            .map(|(c, s)| FeatureRecord {
                cluster: c,
                sentence_id: s.id,
                text: s.text.clone(),
            })
            .collect(),
        provenance: Vec::new(),
        embeddings: Vec::new(),
    };
    let file = LibraryFile::from_library(&build.library, meta);
    let mut invocations = Ledger {
        vocabulary: build.vocabulary_calls,
        expansion: build.expansion_calls,
        ..Ledger::default()
    };
    invocations.sum();
    let manifest = BuildManifest {
        config_hash,
        seed: cfg.seed,
        embedding_provider: embedder.provider_id(),
        llm_model: cfg.model_name.clone(),
        temperature: cfg.temperature,
        clusters: cfg.clusters,
        per_cluster: cfg.per_cluster,
        vocab_per_cluster: cfg.vocab_per_cluster,
        library_size: build.library.len(),
        kmedoids_objective: build.clustering.objective,
        kmedoids_iterations: build.clustering.iterations_run,
        kmedoids_converged: build.clustering.converged,
        cluster_map: build
            .features
            .iter()
            .enumerate()
            .map(|(c, s)| ClusterRecord {
                cluster: c,
                feature_sentence_id: s.id,
                feature_text: s.text.clone(),
                size: build.clustering.members(c).len(),
            })
            .collect(),
        invocations,
        diagnostics: build.diagnostics.clone(),
    };
    Ok(BuiltLibrary {
        build,
        file,
        manifest,
    })
}

pub fn cmd_build_library(cfg: &RunConfig) -> Result<BuildManifest> {
    cfg.validate()?;
    let types = cfg.entity_types()?;
    let loaded = cfg.load_corpus()?;
    let llm = cfg.llm_client()?;
    let embedder = cfg.embedder()?;
    let built = build_stage(cfg, &loaded.task, &types, &llm, embedder.as_ref())?;
    ensure_dir(&cfg.out)?;
    built
        .file
        .save(&cfg.out.join(LIBRARY_FILE))
        .at(Stage::Output)?;
    write_json(&cfg.out.join(BUILD_MANIFEST_FILE), &built.manifest)?;
    log::info!(
        "library of {} examples; {} completions ({} over the network)",
        built.manifest.library_size,
        built.manifest.invocations.total,
        llm.network_calls()
    );
    Ok(built.manifest)
}

/// Selects examples and recognizes every task sentence.
pub fn recognize_stage(
    cfg: &RunConfig,
    task: &TaskSet,
    library: &ExampleLibrary,
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
) -> Result<(Vec<InferenceRecord>, usize)> {
    if task.is_empty() {
        return Ok((Vec::new(), 0));
    }
    if library.is_empty() {
        return Err("library has no examples").at(Stage::Selection);
    }
    let task_vecs = embed_texts(embedder, &task.texts())?;
    let lib_vecs = if library.embeddings.len() == library.len() {
        library.embeddings.clone()
    } else {
        embed_texts(embedder, &library.texts())?
    };
    let matrix = similarity_matrix(&task_vecs, &lib_vecs).at(Stage::Selection)?;
    let selection = select_top_k(&matrix, cfg.top_k);
    let tally = Tally::new(llm);
    let records = recognize_all(
        &task.sentences,
        &library.examples,
        &selection.indices,
        types,
        &tally,
        &cfg.recognition_options(),
    )
    .at(Stage::Recognition)?;
    Ok((records, tally.count()))
}

pub fn write_predictions(path: &Path, records: &[InferenceRecord], audit: bool) -> Result<()> {
    let mut body = Vec::new();
    for r in records {
        let line = if audit {
            serde_json::to_string(r)
        } else {
            serde_json::to_string(&r.summary())
        }
        .expect("record serializes");
        writeln!(body, "{line}").expect("in-memory write");
    }
    fs::write(path, body)
        .map_err(|e| format!("{}: {e}", path.display()))
        .at(Stage::Output)
}

pub fn read_predictions(path: &Path) -> Result<Vec<InferenceRecord>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))
        .at(Stage::Evaluation)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))
                .at(Stage::Evaluation)
        })
        .collect()
}

fn load_library(path: &Path, embedder: &dyn Embedder) -> Result<(LibraryFile, ExampleLibrary)> {
    let file = LibraryFile::load(path).at(Stage::Library)?;
    let library = file.to_library().at(Stage::Library)?;
    if file.meta.embedding_provider != embedder.provider_id() {
        return Err(format!(
            "library was embedded with {} but this run uses {}",
            file.meta.embedding_provider,
            embedder.provider_id()
        ))
        .at(Stage::Config);
    }
    Ok((file, library))
}

pub fn cmd_recognize(cfg: &RunConfig, library_path: &Path) -> Result<RecognizeManifest> {
    cfg.validate()?;
    let types = cfg.entity_types()?;
    let loaded = cfg.load_corpus()?;
    let llm = cfg.llm_client()?;
    let embedder = cfg.embedder()?;
    let (file, library) = load_library(library_path, embedder.as_ref())?;
    let (records, calls) =
        recognize_stage(cfg, &loaded.task, &library, &types, &llm, embedder.as_ref())?;
    ensure_dir(&cfg.out)?;
    write_predictions(&cfg.out.join(PREDICTIONS_FILE), &records, cfg.audit)?;
    let manifest = recognize_manifest(cfg, &file, &records, calls);
    write_json(&cfg.out.join(RECOGNIZE_MANIFEST_FILE), &manifest)?;
    log::info!(
        "recognized {} sentences with {} completions ({} over the network)",
        records.len(),
        calls,
        llm.network_calls()
    );
    Ok(manifest)
}

fn recognize_manifest(
    cfg: &RunConfig,
    library: &LibraryFile,
    records: &[InferenceRecord],
    calls: usize,
) -> RecognizeManifest {
    let mut invocations = Ledger {
        recognition: calls,
        ..Ledger::default()
    };
    invocations.sum();
    RecognizeManifest {
        config_hash: cfg.config_hash(),
        library_config_hash: library.meta.config_hash.clone(),
        sc: cfg.sc,
        attempts: cfg.effective_attempts(),
        top_k: cfg.top_k,
        sentences: records.len(),
        flagged: records.iter().filter(|r| r.flagged).map(|r| r.sentence_id).collect(),
        invocations,
    }
}

/// Scores predictions against gold and, when a library is given, measures
/// library quality.
pub fn evaluate_stage(
    task: &TaskSet,
    records: &[InferenceRecord],
    library: Option<&ExampleLibrary>,
    types: &EntityTypeSet,
    embedder: &dyn Embedder,
) -> Result<Report> {
    let gold = task
        .gold
        .as_ref()
        .ok_or("the corpus carries no gold labels")
        .at(Stage::Evaluation)?;
    let mut pred: BTreeMap<usize, Vec<EntityMention>> = BTreeMap::new();
    for r in records {
        if pred.insert(r.sentence_id, r.chosen.clone()).is_some() {
            return Err(format!("duplicate prediction for sentence {}", r.sentence_id))
                .at(Stage::Evaluation);
        }
    }
    let evaluation = micro_f1(&pred, gold, task.len(), Some(types)).at(Stage::Evaluation)?;
    let library = match library {
        Some(lib) if !task.is_empty() => {
            let task_vecs = embed_texts(embedder, &task.texts())?;
            Some(library_quality(lib, &task_vecs, Some(gold), types, embedder).at(Stage::Evaluation)?)
        }
        _ => None,
    };
    Ok(Report {
        evaluation,
        library,
    })
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    write_json(&dir.join(REPORT_JSON_FILE), report)?;
    fs::write(dir.join(REPORT_TEXT_FILE), report.text())
        .map_err(|e| e.to_string())
        .at(Stage::Output)
}

pub fn cmd_evaluate(cfg: &RunConfig, predictions: &Path, library_path: Option<&Path>) -> Result<Report> {
    let types = cfg.entity_types()?;
    let loaded = cfg.load_corpus()?;
    let records = read_predictions(predictions)?;
    let embedder = cfg.embedder()?;
    let library = match library_path {
        Some(p) => Some(load_library(p, embedder.as_ref())?.1),
        None => None,
    };
    let report = evaluate_stage(&loaded.task, &records, library.as_ref(), &types, embedder.as_ref())?;
    ensure_dir(&cfg.out)?;
    write_report(&cfg.out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub build: BuildManifest,
    pub recognize: RecognizeManifest,
    pub report: Option<Report>,
    /// Completions over all stages.
    pub invocations: Ledger,
    pub network_calls: usize,
}

/// build-library, recognize and (when gold exists) evaluate in one process.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let types = cfg.entity_types()?;
    let loaded = cfg.load_corpus()?;
    let llm = cfg.llm_client()?;
    let embedder = cfg.embedder()?;
    let summary = run_pipeline(cfg, &loaded.task, &types, &llm, embedder.as_ref(), true)?;
    log::info!(
        "{} completions in total ({} over the network)",
        summary.invocations.total,
        llm.network_calls()
    );
    Ok(PipelineSummary {
        network_calls: llm.network_calls(),
        ..summary
    })
}

fn run_pipeline(
    cfg: &RunConfig,
    task: &TaskSet,
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
    persist: bool,
) -> Result<PipelineSummary> {
    let built = build_stage(cfg, task, types, llm, embedder)?;
    let (records, calls) = recognize_stage(cfg, task, &built.build.library, types, llm, embedder)?;
    let recognize = recognize_manifest(cfg, &built.file, &records, calls);
    let report = if task.gold.is_some() {
        Some(evaluate_stage(task, &records, Some(&built.build.library), types, embedder)?)
    } else {
        log::warn!("no gold labels; skipping evaluation");
        None
    };
    if persist {
        ensure_dir(&cfg.out)?;
        built.file.save(&cfg.out.join(LIBRARY_FILE)).at(Stage::Output)?;
        write_json(&cfg.out.join(BUILD_MANIFEST_FILE), &built.manifest)?;
        write_predictions(&cfg.out.join(PREDICTIONS_FILE), &records, cfg.audit)?;
        write_json(&cfg.out.join(RECOGNIZE_MANIFEST_FILE), &recognize)?;
        if let Some(r) = &report {
            write_report(&cfg.out, r)?;
        }
    }
    let mut invocations = built.manifest.invocations.clone();
    invocations.recognition = calls;
    invocations.sum();
    Ok(PipelineSummary {
        build: built.manifest,
        recognize,
        report,
        invocations,
        network_calls: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolatedSentence {
    pub sentence_id: usize,
    pub library: Vec<String>,
    pub invocations: Ledger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolatedManifest {
    pub config_hash: String,
    pub per_cluster: usize,
    pub sc: ScMode,
    pub attempts: usize,
    pub sentences: Vec<IsolatedSentence>,
    pub invocations: Ledger,
    pub report: Option<Report>,
}

/// Treats every sentence as its own task set: a one-cluster library built
/// from that sentence alone, then recognition of that sentence with it.
pub fn isolated_stage(
    cfg: &RunConfig,
    task: &TaskSet,
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    embedder: &dyn Embedder,
) -> Result<(Vec<InferenceRecord>, IsolatedManifest)> {
    let mut records = Vec::with_capacity(task.len());
    let mut per_sentence = Vec::with_capacity(task.len());
    let mut total = Ledger::default();
    let opts = cfg.recognition_options();
    let draws_per_vocab = cfg.parse_retry + 1;
    for (i, sentence) in task.sentences.iter().enumerate() {
        let single = TaskSet {
            sentences: vec![Sentence {
                id: 0,
                text: sentence.text.clone(),
            }],
            gold: None,
        };
        let lib_cfg = LibraryConfig {
            clusters: 1,
            vocabulary_draw_base: i as u32 * draws_per_vocab,
            ..cfg.library_config()
        };
        let build = build_library(&single, &lib_cfg, types, llm, embedder).at(Stage::Library)?;
        let tally = Tally::new(llm);
        let rec = recognize_all(
            std::slice::from_ref(sentence),
            &build.library.examples,
            &[top_examples(&build.library, embedder, sentence, cfg.top_k)?],
            types,
            &tally,
            &opts,
        )
        .at(Stage::Recognition)?
        .remove(0);
        let mut ledger = Ledger {
            vocabulary: build.vocabulary_calls,
            expansion: build.expansion_calls,
            recognition: tally.count(),
            total: 0,
        };
        ledger.sum();
        total.vocabulary += ledger.vocabulary;
        total.expansion += ledger.expansion;
        total.recognition += ledger.recognition;
        per_sentence.push(IsolatedSentence {
            sentence_id: sentence.id,
            library: build.library.texts(),
            invocations: ledger,
        });
        records.push(rec);
    }
    total.sum();
    let manifest = IsolatedManifest {
        config_hash: cfg.config_hash(),
        per_cluster: cfg.per_cluster,
        sc: cfg.sc,
        attempts: cfg.effective_attempts(),
        sentences: per_sentence,
        invocations: total,
        report: None,
    };
    Ok((records, manifest))
}

fn top_examples(
    library: &ExampleLibrary,
    embedder: &dyn Embedder,
    sentence: &Sentence,
    k: usize,
) -> Result<Vec<usize>> {
    let t = embed_texts(embedder, std::slice::from_ref(&sentence.text))?;
    let m = similarity_matrix(&t, &library.embeddings).at(Stage::Selection)?;
    Ok(select_top_k(&m, k).indices.remove(0))
}

pub fn cmd_isolated(cfg: &RunConfig) -> Result<IsolatedManifest> {
    cfg.validate()?;
    let types = cfg.entity_types()?;
    let loaded = cfg.load_corpus()?;
    let llm = cfg.llm_client()?;
    let embedder = cfg.embedder()?;
    let (records, mut manifest) = isolated_stage(cfg, &loaded.task, &types, &llm, embedder.as_ref())?;
    if loaded.task.gold.is_some() {
        manifest.report = Some(evaluate_stage(&loaded.task, &records, None, &types, embedder.as_ref())?);
    }
    ensure_dir(&cfg.out)?;
    write_predictions(&cfg.out.join(PREDICTIONS_FILE), &records, cfg.audit)?;
    write_json(&cfg.out.join(ISOLATED_MANIFEST_FILE), &manifest)?;
    if let Some(r) = &manifest.report {
        write_report(&cfg.out, r)?;
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub clusters: usize,
    pub per_cluster: usize,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// CSV with one row per grid cell: overall micro F1 as mean ± std over the
/// seeded repetitions.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("clusters,per_cluster,runs,f1_mean,f1_std,f1\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2} ± {:.2}\n",
            c.clusters,
            c.per_cluster,
            c.scores.len(),
            c.mean,
            c.std,
            c.mean,
            c.std
        ));
    }
    out
}

/// Runs the full pipeline over the `sweep_clusters × sweep_per_cluster` grid,
/// `sweep_repeats` times per cell with seeds `seed, seed + 1, ...`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    if cfg.sweep_repeats == 0 {
        return Err("sweep_repeats must be at least 1").at(Stage::Config);
    }
    let types = cfg.entity_types()?;
    let loaded = cfg.load_corpus()?;
    if loaded.task.gold.is_none() {
        return Err("sweep needs gold labels").at(Stage::Evaluation);
    }
    let llm = cfg.llm_client()?;
    let embedder = cfg.embedder()?;
    let mut cells = Vec::new();
    for &clusters in &cfg.sweep_clusters {
        for &per_cluster in &cfg.sweep_per_cluster {
            let mut scores = Vec::new();
            for r in 0..cfg.sweep_repeats {
                let run = RunConfig {
                    clusters,
                    per_cluster,
                    seed: cfg.seed + r as u64,
                    ..cfg.clone()
                };
                let s = run_pipeline(&run, &loaded.task, &types, &llm, embedder.as_ref(), false)?;
                scores.push(s.report.expect("gold checked").evaluation.overall.f1);
            }
            let (mean, std) = mean_std(&scores);
            log::info!("clusters={clusters} per_cluster={per_cluster}: {mean:.2} ± {std:.2}");
            cells.push(SweepCell {
                clusters,
                per_cluster,
                scores,
                mean,
                std,
            });
        }
    }
    ensure_dir(&cfg.out)?;
    fs::write(cfg.out.join(SWEEP_FILE), sweep_csv(&cells))
        .map_err(|e| e.to_string())
        .at(Stage::Output)?;
    Ok(cells)
}

/// Whether `cfg` can run without the network.
pub fn is_offline(cfg: &RunConfig) -> bool {
    cfg.llm.kind == BackendKind::Replay
        && cfg.embedding.kind != crate::embedder::ProviderKind::RemoteHttp
}
