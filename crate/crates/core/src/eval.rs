//! Question answering over a memory bank and the F1 / BLEU-1 evaluation harness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construction::{Conversation, ConversationError};
use crate::embedding::EmbeddingProvider;
use crate::model::{FactId, Level, MemoryBank, QuestionCategory, RetrievedSet, UnitRef};
use crate::operators::{self, ChatBackend};
use crate::retrieval::{preset_k, LevelQuotas, RetrievalConfig, RetrievalError, Retriever, Strategy};
use crate::text::word_count;

pub const DEFAULT_CONTEXT_BUDGET: usize = 100_000;

/// Renders retrieved units as prompt context: persona, then scenes, then
/// facts, each in retrieval order. Lines past the word budget are dropped
/// from the end and replaced by a marker line.
pub fn assemble_context(retrieved: &RetrievedSet, bank: &MemoryBank, budget: usize) -> Result<String, RetrievalError> {
    let mut lines: Vec<String> = Vec::with_capacity(retrieved.len());
    for level in [Level::Persona, Level::Scene, Level::Fact] {
        for u in retrieved.units.iter().filter(|u| u.unit.level() == level) {
            let missing = || RetrievalError::Integrity(u.unit);
            lines.push(match u.unit {
                UnitRef::Persona(d) => format!("PERSONA/{}: {}", d.key(), bank.persona.get(d).ok_or_else(missing)?.text),
                UnitRef::Scene(id) => format!("SCENE {id}: {}", bank.scenes.get(&id).ok_or_else(missing)?.text()),
                UnitRef::Fact(id) => {
                    let f = bank.facts.get(&id).ok_or_else(missing)?;
                    format!("FACT {id} [{}]: {}", f.timestamp, f.content)
                }
            });
        }
    }
    let mut used = 0;
    let mut kept = 0;
    for line in &lines {
        let n = word_count(line);
        if used + n > budget {
            break;
        }
        used += n;
        kept += 1;
    }
    let omitted = lines.len() - kept;
    lines.truncate(kept);
    if omitted > 0 {
        lines.push(format!("[{omitted} more memory units omitted to fit the context budget]"));
    }
    Ok(lines.join("\n"))
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip punctuation, drop articles, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let mut tokens = bleu_tokens(text);
    tokens.retain(|t| !ARTICLES.contains(&t.as_str()));
    tokens
}

/// Lowercase, strip punctuation, split on whitespace. Articles are kept.
pub fn bleu_tokens(text: &str) -> Vec<String> {
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    stripped.split_whitespace().map(str::to_string).collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}')
}

fn overlap(pred: &[String], gold: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    common
}

/// Token-level F1 over normalized answers (multiset overlap).
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let common = overlap(&p, &g) as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// BLEU-1: clipped unigram precision times the brevity penalty.
pub fn bleu1(prediction: &str, gold: &str) -> f64 {
    let p = bleu_tokens(prediction);
    let g = bleu_tokens(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let c = p.len() as f64;
    let r = g.len() as f64;
    let precision = overlap(&p, &g) as f64 / c;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    precision * bp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub conversation_id: String,
    pub question: String,
    pub gold_answer: String,
    pub category: QuestionCategory,
    /// Turn ids holding the supporting evidence, when annotated.
    #[serde(default)]
    pub evidence: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub qa: Vec<QaItem>,
    pub skipped_adversarial: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnswerValue {
    Text(String),
    Number(serde_json::Number),
}

#[derive(Deserialize)]
struct RawQa {
    conversation_id: String,
    question: String,
    answer: AnswerValue,
    category: String,
    #[serde(default)]
    evidence: Vec<u64>,
}

#[derive(Deserialize)]
struct RawDataset {
    #[serde(default)]
    conversations: Vec<Conversation>,
    #[serde(default)]
    qa: Vec<RawQa>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("at {path}: {source}")]
    Conversation {
        path: String,
        #[source]
        source: ConversationError,
    },
}

pub const ADVERSARIAL: &str = "adversarial";

pub fn parse_dataset(json: &str) -> Result<Dataset, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let raw: RawDataset = serde_path_to_error::deserialize(de).map_err(|e| DatasetError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    for (i, c) in raw.conversations.iter().enumerate() {
        c.validate().map_err(|source| DatasetError::Conversation {
            path: format!("conversations[{i}]"),
            source,
        })?;
    }
    let mut out = Dataset {
        conversations: raw.conversations,
        ..Default::default()
    };
    for (i, q) in raw.qa.into_iter().enumerate() {
        if q.category == ADVERSARIAL {
            out.skipped_adversarial += 1;
            continue;
        }
        let category = QuestionCategory::from_key(&q.category).ok_or_else(|| DatasetError::Schema {
            path: format!("qa[{i}].category"),
            message: format!("unknown category {:?}", q.category),
        })?;
        out.qa.push(QaItem {
            conversation_id: q.conversation_id,
            question: q.question,
            gold_answer: match q.answer {
                AnswerValue::Text(s) => s,
                AnswerValue::Number(n) => n.to_string(),
            },
            category,
            evidence: q.evidence,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub quotas: LevelQuotas,
    pub retrieval: RetrievalConfig,
    /// Use the per-category `k` instead of `retrieval.k`.
    pub category_presets: bool,
    pub context_budget: usize,
    pub max_in_flight: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Bimem,
            quotas: LevelQuotas::default(),
            retrieval: RetrievalConfig::default(),
            category_presets: true,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub conversation_id: String,
    pub question: String,
    pub category: QuestionCategory,
    pub gold_answer: String,
    pub answer: String,
    pub retrieved: Vec<UnitRef>,
    pub f1: f64,
    pub bleu1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub answer_ms: f64,
}

/// Scores in percent, rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    pub f1: f64,
    pub bleu1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub construction_ms: f64,
    pub mean_answer_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub averaging: String,
    pub skipped_adversarial: usize,
    pub per_category: BTreeMap<QuestionCategory, Scores>,
    pub average: Scores,
    pub timing: Timing,
    pub items: Vec<ItemRecord>,
}

fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

/// Micro-averaged scores over a set of item records.
pub fn aggregate(items: &[&ItemRecord]) -> Scores {
    let n = items.len();
    let mean = |f: &dyn Fn(&ItemRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            items.iter().map(|i| f(i)).sum::<f64>() / n as f64
        }
    };
    let recalls: Vec<f64> = items.iter().filter_map(|i| i.evidence_recall).collect();
    Scores {
        count: n,
        f1: percent(mean(&|i| i.f1)),
        bleu1: percent(mean(&|i| i.bleu1)),
        evidence_recall: (!recalls.is_empty()).then(|| percent(recalls.iter().sum::<f64>() / recalls.len() as f64)),
    }
}

impl EvalReport {
    pub fn from_items(strategy: Strategy, items: Vec<ItemRecord>, skipped_adversarial: usize, construction_ms: f64) -> Self {
        let per_category = QuestionCategory::ALL
            .into_iter()
            .filter_map(|c| {
                let subset: Vec<&ItemRecord> = items.iter().filter(|i| i.category == c).collect();
                (!subset.is_empty()).then(|| (c, aggregate(&subset)))
            })
            .collect();
        let all: Vec<&ItemRecord> = items.iter().collect();
        let mean_answer_ms = if items.is_empty() {
            0.0
        } else {
            items.iter().map(|i| i.answer_ms).sum::<f64>() / items.len() as f64
        };
        Self {
            strategy,
            averaging: "micro: mean over all items".into(),
            skipped_adversarial,
            per_category,
            average: aggregate(&all),
            timing: Timing {
                construction_ms,
                mean_answer_ms,
            },
            items,
        }
    }

    /// Aligned text table: one row per category plus the average.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "strategy: {}   averaging: {}", self.strategy.key(), self.averaging);
        let _ = writeln!(out, "{:<12} {:>6} {:>8} {:>8} {:>8}", "category", "n", "F1", "B1", "recall");
        let row = |out: &mut String, name: &str, s: &Scores| {
            let recall = s.evidence_recall.map_or("-".to_string(), |r| format!("{r:.2}"));
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>8.2} {:>8.2} {:>8}",
                name, s.count, s.f1, s.bleu1, recall
            );
        };
        for (c, s) in &self.per_category {
            row(&mut out, c.key(), s);
        }
        row(&mut out, "average", &self.average);
        out
    }
}

fn evidence_recall(evidence: &[FactId], retrieved: &RetrievedSet) -> Option<f64> {
    if evidence.is_empty() {
        return None;
    }
    let wanted: BTreeSet<FactId> = evidence.iter().copied().collect();
    let got = retrieved.fact_ids();
    Some(wanted.intersection(&got).count() as f64 / wanted.len() as f64)
}

/// Answers a single question: retrieve, assemble context, generate.
pub fn answer_question(
    retriever: &Retriever<'_>,
    question: &str,
    cfg: &RetrievalConfig,
    eval: &EvalConfig,
    embedder: &dyn EmbeddingProvider,
    backend: &dyn ChatBackend,
) -> Result<(RetrievedSet, String), String> {
    let retrieved = retriever
        .retrieve_with(question, embedder, cfg, eval.strategy, eval.quotas)
        .map_err(|e| e.to_string())?;
    let context = assemble_context(&retrieved, retriever.bank(), eval.context_budget).map_err(|e| e.to_string())?;
    let answer = operators::generate_answer(backend, question, &context).map_err(|e| e.to_string())?;
    Ok((retrieved, answer))
}

/// Runs every item against the bank of its conversation. Failures score 0 and keep a note.
pub fn run_eval(
    banks: &BTreeMap<String, MemoryBank>,
    items: &[QaItem],
    cfg: &EvalConfig,
    embedder: &dyn EmbeddingProvider,
    backend: &dyn ChatBackend,
) -> Vec<ItemRecord> {
    let retrievers: BTreeMap<&str, Retriever<'_>> = banks.iter().map(|(id, b)| (id.as_str(), Retriever::new(b))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let start = Instant::now();
                let mut rcfg = cfg.retrieval.clone();
                if cfg.category_presets {
                    rcfg.k = preset_k(item.category);
                }
                let outcome = match retrievers.get(item.conversation_id.as_str()) {
                    None => Err(format!("no memory bank for conversation {:?}", item.conversation_id)),
                    Some(r) => answer_question(r, &item.question, &rcfg, cfg, embedder, backend),
                };
                let answer_ms = start.elapsed().as_secs_f64() * 1000.0;
                match outcome {
                    Ok((retrieved, answer)) => ItemRecord {
                        conversation_id: item.conversation_id.clone(),
                        question: item.question.clone(),
                        category: item.category,
                        gold_answer: item.gold_answer.clone(),
                        f1: token_f1(&answer, &item.gold_answer),
                        bleu1: bleu1(&answer, &item.gold_answer),
                        evidence_recall: evidence_recall(&item.evidence, &retrieved),
                        retrieved: retrieved.units.iter().map(|u| u.unit).collect(),
                        answer,
                        error: None,
                        answer_ms,
                    },
                    Err(e) => ItemRecord {
                        conversation_id: item.conversation_id.clone(),
                        question: item.question.clone(),
                        category: item.category,
                        gold_answer: item.gold_answer.clone(),
                        answer: String::new(),
                        retrieved: Vec::new(),
                        f1: 0.0,
                        bleu1: 0.0,
                        evidence_recall: (!item.evidence.is_empty()).then_some(0.0),
                        error: Some(e),
                        answer_ms,
                    },
                }
            })
            .collect()
    })
}
