//! Demonstration-driven recognition with self-consistency voting.
//!
//! Each task sentence is sent `attempts` times with its retrieved examples.
//! Entity-level voting scores every attempt by the mean agreement count of its
//! mentions and keeps the best attempt whole, so a mention only one attempt
//! believes in drags its attempt down instead of leaking into the answer.

use std::collections::{BTreeMap, HashSet};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::corpus::{validate_mentions, EntityMention, EntityTypeSet, LabeledExample, Sentence};
use crate::extract::{first_json, mentions_from_array, JsonShape};
use crate::llm::{
    definitions_block, examples_block, render, type_set_block, Bindings, LlmBackend, LlmError,
    PromptTemplate, Sampling, TemplateKind,
};
use crate::selector::DEFAULT_TOP_K;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScMode {
    #[default]
    Single,
    EntitySc,
    ResponseSc,
}

impl std::str::FromStr for ScMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "single" => Ok(ScMode::Single),
            "entity" | "entity-sc" => Ok(ScMode::EntitySc),
            "response" | "response-sc" => Ok(ScMode::ResponseSc),
            other => Err(format!("unknown self-consistency mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecognitionOptions {
    pub sampling: Sampling,
    pub language: String,
    pub top_k: usize,
    pub mode: ScMode,
    /// Completions per sentence. Forced to 1 in single mode.
    pub attempts: usize,
    /// Sentences recognized concurrently.
    pub max_in_flight: usize,
    pub template: PromptTemplate,
    pub zero_shot_template: PromptTemplate,
}

impl Default for RecognitionOptions {
    fn default() -> Self {
        Self {
            sampling: Sampling::default(),
            language: "English".into(),
            top_k: DEFAULT_TOP_K,
            mode: ScMode::Single,
            attempts: 5,
            max_in_flight: 4,
            template: PromptTemplate::default_for(TemplateKind::Recognition),
            zero_shot_template: PromptTemplate::default_for(TemplateKind::ZeroShot),
        }
    }
}

impl RecognitionOptions {
    pub fn effective_attempts(&self) -> usize {
        match self.mode {
            ScMode::Single => 1,
            _ => self.attempts.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceAttempt {
    pub attempt_index: usize,
    pub raw_response: String,
    pub entities: Vec<EntityMention>,
    pub parse_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityScore {
    #[serde(flatten)]
    pub mention: EntityMention,
    pub count: usize,
}

/// One line of the predictions file. Audit fields are empty unless kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub sentence_id: usize,
    pub chosen: Vec<EntityMention>,
    pub mode: ScMode,
    /// Every attempt failed to parse.
    #[serde(default)]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attempts: Vec<InferenceAttempt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entity_scores: Vec<EntityScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attempt_scores: Vec<f64>,
}

impl InferenceRecord {
    /// The record without its audit trail.
    pub fn summary(&self) -> Self {
        Self {
            examples: Vec::new(),
            attempts: Vec::new(),
            entity_scores: Vec::new(),
            attempt_scores: Vec::new(),
            ..self.clone()
        }
    }
}

/// Renders the recognition prompt. An empty example list selects the
/// zero-shot template.
pub fn recognition_prompt(
    sentence: &Sentence,
    examples: &[&LabeledExample],
    types: &EntityTypeSet,
    opts: &RecognitionOptions,
) -> Result<String, LlmError> {
    let mut b = Bindings::new();
    b.insert("language", opts.language.clone());
    b.insert("entity_type_set", type_set_block(types));
    b.insert("definitions", definitions_block(types));
    b.insert("task_sentence", sentence.text.clone());
    if examples.is_empty() {
        render(&opts.zero_shot_template, &b)
    } else {
        b.insert("examples_block", examples_block(examples));
        render(&opts.template, &b)
    }
}

/// Mentions in a reply, validated against `text`. `None` when the reply holds
/// no JSON array of objects.
pub fn parse_prediction(raw: &str, text: &str, types: &EntityTypeSet) -> Option<Vec<EntityMention>> {
    let value = first_json(raw, JsonShape::Array)?;
    let mentions = mentions_from_array(value.as_array().expect("shape checked"))?;
    let (kept, problems) = validate_mentions(text, mentions, Some(types));
    for p in problems {
        log::debug!("dropping predicted mention: {p}");
    }
    Some(kept)
}

pub fn recognize_once(
    sentence: &Sentence,
    examples: &[&LabeledExample],
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    opts: &RecognitionOptions,
    attempt_index: usize,
) -> Result<InferenceAttempt, LlmError> {
    let prompt = recognition_prompt(sentence, examples, types, opts)?;
    let raw = llm.complete(&opts.sampling.request(prompt, attempt_index as u32))?;
    let parsed = parse_prediction(&raw, &sentence.text, types);
    Ok(InferenceAttempt {
        attempt_index,
        raw_response: raw,
        parse_ok: parsed.is_some(),
        entities: parsed.unwrap_or_default(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityVote {
    pub chosen: Vec<EntityMention>,
    /// Agreement count per distinct mention, in first-seen order.
    pub entity_scores: Vec<EntityScore>,
    pub attempt_scores: Vec<f64>,
}

/// Entity-level self-consistency over `attempts` (at least one).
pub fn entity_sc_vote(attempts: &[InferenceAttempt]) -> EntityVote {
    assert!(!attempts.is_empty(), "vote needs at least one attempt");
    let sets: Vec<HashSet<&EntityMention>> =
        attempts.iter().map(|a| a.entities.iter().collect()).collect();
    let mut order: Vec<&EntityMention> = Vec::new();
    let mut counts: BTreeMap<&EntityMention, usize> = BTreeMap::new();
    for e in attempts.iter().flat_map(|a| &a.entities) {
        if !counts.contains_key(e) {
            order.push(e);
            counts.insert(e, 0);
        }
    }
    for set in &sets {
        for m in set {
            *counts.get_mut(m).expect("seen") += 1;
        }
    }
    let attempt_scores: Vec<f64> = sets
        .iter()
        .map(|set| {
            if set.is_empty() {
                0.0
            } else {
                set.iter().map(|m| counts[m]).sum::<usize>() as f64 / set.len() as f64
            }
        })
        .collect();
    let empty = sets.iter().filter(|s| s.is_empty()).count();
    let chosen = if 2 * empty > attempts.len() {
        Vec::new()
    } else {
        let mut best = 0;
        for i in 1..attempts.len() {
            if attempt_scores[i] > attempt_scores[best] {
                best = i;
            }
        }
        attempts[best].entities.clone()
    };
    EntityVote {
        chosen,
        entity_scores: order
            .into_iter()
            .map(|m| EntityScore {
                mention: m.clone(),
                count: counts[m],
            })
            .collect(),
        attempt_scores,
    }
}

/// Plurality vote over whole prediction sets; the group holding the earliest
/// attempt wins ties.
pub fn response_sc_vote(attempts: &[InferenceAttempt]) -> Vec<EntityMention> {
    assert!(!attempts.is_empty(), "vote needs at least one attempt");
    let key = |a: &InferenceAttempt| {
        let mut k = a.entities.clone();
        k.sort();
        k.dedup();
        k
    };
    let mut groups: Vec<(Vec<EntityMention>, usize, usize)> = Vec::new();
    for (i, a) in attempts.iter().enumerate() {
        let k = key(a);
        match groups.iter_mut().find(|g| g.0 == k) {
            Some(g) => g.1 += 1,
            None => groups.push((k, 1, i)),
        }
    }
    let mut best = &groups[0];
    for g in &groups[1..] {
        if g.1 > best.1 {
            best = g;
        }
    }
    attempts[best.2].entities.clone()
}

/// Runs the configured number of attempts for one sentence and votes.
pub fn recognize_sentence(
    sentence: &Sentence,
    examples: &[&LabeledExample],
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    opts: &RecognitionOptions,
) -> Result<InferenceRecord, LlmError> {
    let attempts = (0..opts.effective_attempts())
        .map(|i| recognize_once(sentence, examples, types, llm, opts, i))
        .collect::<Result<Vec<_>, _>>()?;
    let vote = entity_sc_vote(&attempts);
    let chosen = match opts.mode {
        ScMode::Single => attempts[0].entities.clone(),
        ScMode::EntitySc => vote.chosen,
        ScMode::ResponseSc => response_sc_vote(&attempts),
    };
    Ok(InferenceRecord {
        sentence_id: sentence.id,
        chosen,
        mode: opts.mode,
        flagged: attempts.iter().all(|a| !a.parse_ok),
        examples: Vec::new(),
        attempts,
        entity_scores: vote.entity_scores,
        attempt_scores: vote.attempt_scores,
    })
}

/// Recognizes every sentence with its selected examples (`selection[i]` are
/// library indices for `sentences[i]`). Output order follows `sentences`.
pub fn recognize_all(
    sentences: &[Sentence],
    library: &[LabeledExample],
    selection: &[Vec<usize>],
    types: &EntityTypeSet,
    llm: &dyn LlmBackend,
    opts: &RecognitionOptions,
) -> Result<Vec<InferenceRecord>, LlmError> {
    assert_eq!(sentences.len(), selection.len(), "one selection per sentence");
    let slots: Vec<Mutex<Option<Result<InferenceRecord, LlmError>>>> =
        sentences.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let workers = opts.max_in_flight.max(1).min(sentences.len());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= sentences.len() {
                    break;
                }
                let examples: Vec<&LabeledExample> =
                    selection[i].iter().map(|&j| &library[j]).collect();
                let r = recognize_sentence(&sentences[i], &examples, types, llm, opts).map(
                    |mut rec| {
                        rec.examples = selection[i].clone();
                        rec
                    },
                );
                let failed = r.is_err();
                *slots[i].lock().unwrap() = Some(r);
                if failed {
                    *next.lock().unwrap() = sentences.len();
                }
            });
        }
    });
    let mut out = Vec::with_capacity(sentences.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => out.push(r?),
            None => continue,
        }
    }
    Ok(out)
}
