//! Prediction scoring and library-quality measures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityMention, EntityTypeSet};
use crate::embedder::{check_vectors, cosine_similarity, EmbedError, Embedder, EmbeddingVector};
use crate::librarian::ExampleLibrary;
use crate::selector::{row_maxima, similarity_matrix};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction for sentence {0}, which is not in the task set")]
    UnknownSentence(usize),
    #[error("library is empty")]
    EmptyLibrary,
    #[error("task set is empty")]
    EmptyTask,
    #[error(transparent)]
    Embedding(#[from] EmbedError),
}

/// Percentage rounded to two decimals.
fn pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Scores {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Self {
            precision: pct(p),
            recall: pct(r),
            f1: pct(f),
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub sentences: usize,
    pub gold: usize,
    pub predicted: usize,
}

/// Precision, recall and F1 on a 0–100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_type: BTreeMap<String, Scores>,
    pub overall: Scores,
    pub counts: Counts,
}

impl EvaluationReport {
    /// Fixed-width table, one row per label plus the micro average.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10}{:>10}{:>10}{:>10}", "Label", "Precision", "Recall", "F1");
        let rows = self
            .per_type
            .iter()
            .map(|(l, s)| (l.as_str(), s))
            .chain(std::iter::once(("Overall", &self.overall)));
        for (label, s) in rows {
            let _ = writeln!(
                out,
                "{:<10}{:>10.2}{:>10.2}{:>10.2}",
                label, s.precision, s.recall, s.f1
            );
        }
        let _ = writeln!(
            out,
            "sentences={} gold={} predicted={}",
            self.counts.sentences, self.counts.gold, self.counts.predicted
        );
        out
    }
}

/// Micro-averaged scores under exact `(text, label)` set matching. Sentences
/// missing from either map count as empty. Every label of `types` gets a
/// per-type row, as does any other label seen in gold or predictions.
pub fn micro_f1(
    pred: &BTreeMap<usize, Vec<EntityMention>>,
    gold: &BTreeMap<usize, Vec<EntityMention>>,
    sentences: usize,
    types: Option<&EntityTypeSet>,
) -> Result<EvaluationReport, EvalError> {
    if let Some(&id) = pred.keys().chain(gold.keys()).find(|&&id| id >= sentences) {
        return Err(EvalError::UnknownSentence(id));
    }
    let mut per: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    if let Some(types) = types {
        for l in types.labels() {
            per.insert(l.to_string(), (0, 0, 0));
        }
    }
    let (mut n_gold, mut n_pred) = (0, 0);
    let empty = Vec::new();
    for id in 0..sentences {
        let p: BTreeSet<&EntityMention> = pred.get(&id).unwrap_or(&empty).iter().collect();
        let g: BTreeSet<&EntityMention> = gold.get(&id).unwrap_or(&empty).iter().collect();
        n_gold += g.len();
        n_pred += p.len();
        for m in p.union(&g) {
            let e = per.entry(m.entity_label.clone()).or_default();
            match (p.contains(m), g.contains(m)) {
                (true, true) => e.0 += 1,
                (true, false) => e.1 += 1,
                (false, true) => e.2 += 1,
                (false, false) => unreachable!(),
            }
        }
    }
    let (tp, fp, fn_) = per
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    Ok(EvaluationReport {
        per_type: per
            .into_iter()
            .map(|(l, (tp, fp, fn_))| (l, Scores::from_counts(tp, fp, fn_)))
            .collect(),
        overall: Scores::from_counts(tp, fp, fn_),
        counts: Counts {
            sentences,
            gold: n_gold,
            predicted: n_pred,
        },
    })
}

/// Mean over task vectors of the best cosine similarity to any library vector.
pub fn ahs(task: &[EmbeddingVector], library: &[EmbeddingVector]) -> Result<f64, EvalError> {
    if library.is_empty() {
        return Err(EvalError::EmptyLibrary);
    }
    if task.is_empty() {
        return Err(EvalError::EmptyTask);
    }
    let m = similarity_matrix(task, library)?;
    let maxima = row_maxima(&m);
    Ok(maxima.iter().map(|x| x.expect("library non-empty")).sum::<f64>() / task.len() as f64)
}

/// Mean `1 - cos` over unordered pairs. `None` below two vectors.
pub fn diversity_of(vectors: &[EmbeddingVector]) -> Result<Option<f64>, EmbedError> {
    let n = vectors.len();
    if n < 2 {
        return Ok(None);
    }
    check_vectors(vectors, None)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0 - cosine_similarity(&vectors[i], &vectors[j])?;
        }
    }
    Ok(Some(total * 2.0 / (n * (n - 1)) as f64))
}

/// Diversity of the distinct strings in `entities`, which are deduplicated
/// case-sensitively and embedded in sorted order.
pub fn entity_diversity(
    entities: &[String],
    embedder: &dyn Embedder,
) -> Result<Option<f64>, EmbedError> {
    let unique: Vec<String> = entities
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if unique.len() < 2 {
        return Ok(None);
    }
    diversity_of(&embedder.embed_batch(&unique)?)
}

/// Unique surface strings per label.
pub fn entity_pools<'a>(
    mentions: impl IntoIterator<Item = &'a EntityMention>,
) -> BTreeMap<String, Vec<String>> {
    let mut pools: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for m in mentions {
        pools
            .entry(m.entity_label.clone())
            .or_default()
            .insert(m.entity_text.clone());
    }
    pools
        .into_iter()
        .map(|(l, s)| (l, s.into_iter().collect()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub ed_library: BTreeMap<String, f64>,
    pub ed_task: BTreeMap<String, f64>,
    pub edr: BTreeMap<String, f64>,
    pub diagnostics: Vec<String>,
}

/// Per-label diversity ratio of library entities to gold task entities.
/// Labels with fewer than two unique entities on a side, or zero task
/// diversity, get no ratio and a diagnostic instead.
pub fn edr(
    library: &BTreeMap<String, Vec<String>>,
    task: &BTreeMap<String, Vec<String>>,
    labels: &[String],
    embedder: &dyn Embedder,
) -> Result<DiversityReport, EmbedError> {
    let mut r = DiversityReport::default();
    for label in labels {
        let none = Vec::new();
        let lib = entity_diversity(library.get(label).unwrap_or(&none), embedder)?;
        let tsk = entity_diversity(task.get(label).unwrap_or(&none), embedder)?;
        if let Some(x) = lib {
            r.ed_library.insert(label.clone(), x);
        }
        if let Some(x) = tsk {
            r.ed_task.insert(label.clone(), x);
        }
        match (lib, tsk) {
            (Some(l), Some(t)) if t > 0.0 => {
                r.edr.insert(label.clone(), l / t);
            }
            (Some(_), Some(_)) => r
                .diagnostics
                .push(format!("{label}: task entities have zero diversity")),
            (None, _) => r
                .diagnostics
                .push(format!("{label}: fewer than 2 unique library entities")),
            (_, None) => r
                .diagnostics
                .push(format!("{label}: fewer than 2 unique task entities")),
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryQualityReport {
    pub ahs: f64,
    #[serde(flatten)]
    pub diversity: DiversityReport,
    /// Library mentions breaking the substring or label rule.
    pub violations: usize,
}

/// AHS of the library against the task, and EDR when gold is available.
pub fn library_quality(
    library: &ExampleLibrary,
    task_vecs: &[EmbeddingVector],
    gold: Option<&BTreeMap<usize, Vec<EntityMention>>>,
    types: &EntityTypeSet,
    embedder: &dyn Embedder,
) -> Result<LibraryQualityReport, EvalError> {
    let lib_vecs = if library.embeddings.len() == library.len() && !library.is_empty() {
        library.embeddings.clone()
    } else {
        embedder.embed_batch(&library.texts())?
    };
    let ahs = ahs(task_vecs, &lib_vecs)?;
    let labels: Vec<String> = types.labels().map(str::to_string).collect();
    let diversity = match gold {
        Some(g) => edr(
            &entity_pools(library.examples.iter().flat_map(|e| &e.entities)),
            &entity_pools(g.values().flatten()),
            &labels,
            embedder,
        )?,
        None => DiversityReport {
            diagnostics: vec!["no gold labels; EDR unavailable".into()],
            ..Default::default()
        },
    };
    Ok(LibraryQualityReport {
        ahs,
        diversity,
        violations: library.violations(types).len(),
    })
}
