//! Associative retrieval over the three memory levels.
//!
//! An initial hybrid search (dense cosine fused with BM25) ranks facts,
//! calibrated scenes and persona dimensions in one pool. Spreading activation
//! then adds, for every retrieved fact, its parent scene and, for every
//! retrieved scene, its `m` members most similar to the scene. Persona
//! units are anchors and spread nothing.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_text, similarity, EmbedError, EmbeddingProvider};
use crate::model::{FactId, Level, MemoryBank, Origin, QuestionCategory, RetrievalUnit, RetrievedSet, SceneId, UnitRef};
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub m: usize,
    pub alpha: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 30,
            m: 3,
            alpha: 0.5,
            bm25_k1: 1.2,
            bm25_b: 0.75,
        }
    }
}

impl RetrievalConfig {
    /// Default configuration with the per-category `k`.
    pub fn for_category(category: QuestionCategory) -> Self {
        Self {
            k: preset_k(category),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(RetrievalError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.bm25_k1.is_nan() || self.bm25_k1 < 0.0 || !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(RetrievalError::Config("bm25 parameters out of range".into()));
        }
        Ok(())
    }

    /// Upper bound on the size of a spread result.
    pub fn max_result_size(&self) -> usize {
        self.k * (1 + self.m.max(1))
    }
}

pub fn preset_k(category: QuestionCategory) -> usize {
    match category {
        QuestionCategory::SingleHop => 35,
        QuestionCategory::MultiHop => 25,
        QuestionCategory::Temporal => 30,
        QuestionCategory::OpenDomain => 25,
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("query embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("embedder dimension {embedder} does not match bank dimension {bank}")]
    Dimension { embedder: usize, bank: usize },
    #[error("dangling reference to {0}")]
    Integrity(UnitRef),
}

/// Text indexed for a unit. Persona dimensions are indexed as `name: text`.
pub fn unit_text(bank: &MemoryBank, unit: UnitRef) -> Option<String> {
    match unit {
        UnitRef::Fact(id) => bank.facts.get(&id).map(|f| f.content.clone()),
        UnitRef::Scene(id) => bank.scenes.get(&id).map(|s| s.text()),
        UnitRef::Persona(d) => bank.persona.get(d).map(|p| format!("{}: {}", d.key(), p.text)),
    }
}

/// All units of a bank in level order: persona, scenes, facts.
pub fn bank_units(bank: &MemoryBank) -> Vec<UnitRef> {
    bank.persona
        .dimensions
        .keys()
        .map(|&d| UnitRef::Persona(d))
        .chain(bank.scenes.keys().map(|&id| UnitRef::Scene(id)))
        .chain(bank.facts.keys().map(|&id| UnitRef::Fact(id)))
        .collect()
}

/// BM25 statistics over a fixed list of documents.
#[derive(Debug, Clone)]
pub struct LexicalIndex {
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freqs: HashMap<String, usize>,
    avg_len: f64,
}

impl LexicalIndex {
    pub fn new<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut doc_freqs: HashMap<String, usize> = HashMap::new();
        for d in docs {
            let tokens = tokenize(d.as_ref());
            doc_lens.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freqs.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        Self {
            term_freqs,
            doc_lens,
            doc_freqs,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.doc_freqs.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Okapi BM25 of document `doc` for the distinct terms of `query_tokens`.
pub fn bm25_score(index: &LexicalIndex, query_tokens: &[String], doc: usize, k1: f64, b: f64) -> f64 {
    let tf = &index.term_freqs[doc];
    let len_norm = if index.avg_len > 0.0 {
        index.doc_lens[doc] as f64 / index.avg_len
    } else {
        0.0
    };
    let mut seen = HashSet::new();
    let mut score = 0.0;
    for t in query_tokens {
        if !seen.insert(t.as_str()) {
            continue;
        }
        let Some(&f) = tf.get(t) else { continue };
        let f = f as f64;
        score += index.idf(t) * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * len_norm));
    }
    score
}

/// Min-max normalization; a constant (or empty) pool maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max <= min {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Per-level selection counts for the level-by-level ablation strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelQuotas {
    pub fact: usize,
    pub scene: usize,
    pub persona: usize,
}

impl Default for LevelQuotas {
    fn default() -> Self {
        Self {
            fact: 1,
            scene: 15,
            persona: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Initial search plus spreading in both directions.
    Bimem,
    /// Initial search only.
    Hierarchical,
    /// Persona, then scenes, then facts associated from those scenes.
    Topdown,
    /// Facts, then their parent scenes, then persona.
    Bottomup,
    /// Initial search plus scene-to-fact spreading.
    Scene2fact,
    /// Initial search plus fact-to-scene spreading.
    Fact2scene,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Bimem,
        Strategy::Hierarchical,
        Strategy::Topdown,
        Strategy::Bottomup,
        Strategy::Scene2fact,
        Strategy::Fact2scene,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Strategy::Bimem => "bimem",
            Strategy::Hierarchical => "hierarchical",
            Strategy::Topdown => "topdown",
            Strategy::Bottomup => "bottomup",
            Strategy::Scene2fact => "scene2fact",
            Strategy::Fact2scene => "fact2scene",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.key() == key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spread {
    pub fact_to_scene: bool,
    pub scene_to_fact: bool,
}

impl Spread {
    pub const BOTH: Spread = Spread {
        fact_to_scene: true,
        scene_to_fact: true,
    };
}

/// Read-only retrieval view over a bank: lexical index and parent map are built once.
#[derive(Debug)]
pub struct Retriever<'a> {
    bank: &'a MemoryBank,
    units: Vec<UnitRef>,
    index: LexicalIndex,
    parent: BTreeMap<FactId, SceneId>,
}

impl<'a> Retriever<'a> {
    pub fn new(bank: &'a MemoryBank) -> Self {
        let units = bank_units(bank);
        let docs: Vec<String> = units
            .iter()
            .map(|&u| unit_text(bank, u).expect("unit listed from bank"))
            .collect();
        Self {
            bank,
            index: LexicalIndex::new(&docs),
            units,
            parent: bank.fact_to_scene(),
        }
    }

    pub fn bank(&self) -> &MemoryBank {
        self.bank
    }

    pub fn units(&self) -> &[UnitRef] {
        &self.units
    }

    pub fn index(&self) -> &LexicalIndex {
        &self.index
    }

    pub fn embedding(&self, unit: UnitRef) -> Option<&'a [f64]> {
        match unit {
            UnitRef::Fact(id) => self.bank.facts.get(&id).map(|f| f.embedding.as_slice()),
            UnitRef::Scene(id) => self.bank.scenes.get(&id).map(|s| s.embedding.as_slice()),
            UnitRef::Persona(d) => self.bank.persona.get(d).map(|p| p.embedding.as_slice()),
        }
    }

    pub fn embed_query(&self, query: &str, embedder: &dyn EmbeddingProvider) -> Result<Vec<f64>, RetrievalError> {
        if embedder.dimension() != self.bank.dimension {
            return Err(RetrievalError::Dimension {
                embedder: embedder.dimension(),
                bank: self.bank.dimension,
            });
        }
        Ok(embed_text(embedder, query)?)
    }

    /// Raw cosine similarity of every unit to the query vector, in `units()` order.
    pub fn dense_scores(&self, query_vec: &[f64]) -> Vec<f64> {
        self.units
            .iter()
            .map(|&u| similarity(query_vec, self.embedding(u).unwrap_or(&[])).unwrap_or(0.0))
            .collect()
    }

    /// Raw BM25 of every unit, in `units()` order.
    pub fn lexical_scores(&self, query: &str, cfg: &RetrievalConfig) -> Vec<f64> {
        let q = tokenize(query);
        (0..self.units.len())
            .map(|i| bm25_score(&self.index, &q, i, cfg.bm25_k1, cfg.bm25_b))
            .collect()
    }

    /// `alpha · norm(dense) + (1 − alpha) · norm(bm25)` over the whole pool.
    pub fn hybrid_scores(&self, query: &str, query_vec: &[f64], cfg: &RetrievalConfig) -> Vec<f64> {
        let dense = min_max(&self.dense_scores(query_vec));
        let lexical = min_max(&self.lexical_scores(query, cfg));
        dense
            .iter()
            .zip(&lexical)
            .map(|(d, l)| cfg.alpha * d + (1.0 - cfg.alpha) * l)
            .collect()
    }

    /// All units ranked by hybrid score, ties by level (persona, scene, fact) then id.
    pub fn rank(&self, query: &str, query_vec: &[f64], cfg: &RetrievalConfig) -> Vec<(UnitRef, f64)> {
        rank_by(&self.units, &self.hybrid_scores(query, query_vec, cfg))
    }

    pub fn initial_search(
        &self,
        query: &str,
        embedder: &dyn EmbeddingProvider,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<RetrievalUnit>, RetrievalError> {
        cfg.validate()?;
        if self.units.is_empty() {
            return Ok(Vec::new());
        }
        let qv = self.embed_query(query, embedder)?;
        Ok(self
            .rank(query, &qv, cfg)
            .into_iter()
            .take(cfg.k)
            .map(|(unit, score)| RetrievalUnit {
                unit,
                score,
                origin: Origin::Initial,
                source: None,
            })
            .collect())
    }

    /// Dense similarity between a scene and each of its members, best first, ties by id.
    pub fn scene_members_ranked(&self, scene: SceneId) -> Result<Vec<(FactId, f64)>, RetrievalError> {
        let s = self
            .bank
            .scenes
            .get(&scene)
            .ok_or(RetrievalError::Integrity(UnitRef::Scene(scene)))?;
        let mut scored = Vec::with_capacity(s.members.len());
        for &f in &s.members {
            let fact = self.bank.facts.get(&f).ok_or(RetrievalError::Integrity(UnitRef::Fact(f)))?;
            scored.push((f, similarity(&s.embedding, &fact.embedding).unwrap_or(0.0)));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored)
    }

    fn parent_scene(&self, fact: FactId) -> Result<SceneId, RetrievalError> {
        if !self.bank.facts.contains_key(&fact) {
            return Err(RetrievalError::Integrity(UnitRef::Fact(fact)));
        }
        self.parent
            .get(&fact)
            .copied()
            .ok_or(RetrievalError::Integrity(UnitRef::Fact(fact)))
    }

    /// One-hop spreading from the initial set. Spread units are never spread further.
    pub fn spread_activation(&self, initial: &[RetrievalUnit], m: usize, spread: Spread) -> Result<RetrievedSet, RetrievalError> {
        let mut units: Vec<RetrievalUnit> = Vec::new();
        let mut present: HashSet<UnitRef> = HashSet::new();
        for u in initial {
            if !self.bank.contains(u.unit) {
                return Err(RetrievalError::Integrity(u.unit));
            }
            if present.insert(u.unit) {
                units.push(u.clone());
            }
        }
        for u in initial {
            match u.unit {
                UnitRef::Fact(f) if spread.fact_to_scene => {
                    let s = self.parent_scene(f)?;
                    let scene = &self.bank.scenes[&s];
                    let score = similarity(&scene.embedding, &self.bank.facts[&f].embedding).unwrap_or(0.0);
                    let unit = UnitRef::Scene(s);
                    if present.insert(unit) {
                        units.push(RetrievalUnit {
                            unit,
                            score,
                            origin: Origin::SpreadFromFact,
                            source: Some(u.unit),
                        });
                    }
                }
                UnitRef::Scene(s) if spread.scene_to_fact => {
                    for (f, score) in self.scene_members_ranked(s)?.into_iter().take(m) {
                        let unit = UnitRef::Fact(f);
                        if present.insert(unit) {
                            units.push(RetrievalUnit {
                                unit,
                                score,
                                origin: Origin::SpreadFromScene,
                                source: Some(u.unit),
                            });
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(RetrievedSet { units })
    }

    /// Initial hybrid search followed by bidirectional spreading.
    pub fn retrieve(
        &self,
        query: &str,
        embedder: &dyn EmbeddingProvider,
        cfg: &RetrievalConfig,
    ) -> Result<RetrievedSet, RetrievalError> {
        self.retrieve_with(query, embedder, cfg, Strategy::Bimem, LevelQuotas::default())
    }

    pub fn retrieve_with(
        &self,
        query: &str,
        embedder: &dyn EmbeddingProvider,
        cfg: &RetrievalConfig,
        strategy: Strategy,
        quotas: LevelQuotas,
    ) -> Result<RetrievedSet, RetrievalError> {
        let spread = match strategy {
            Strategy::Bimem => Spread::BOTH,
            Strategy::Scene2fact => Spread {
                fact_to_scene: false,
                scene_to_fact: true,
            },
            Strategy::Fact2scene => Spread {
                fact_to_scene: true,
                scene_to_fact: false,
            },
            Strategy::Hierarchical => Spread {
                fact_to_scene: false,
                scene_to_fact: false,
            },
            Strategy::Topdown => return self.top_down(query, embedder, cfg, quotas),
            Strategy::Bottomup => return self.bottom_up(query, embedder, cfg, quotas),
        };
        let initial = self.initial_search(query, embedder, cfg)?;
        self.spread_activation(&initial, cfg.m, spread)
    }

    fn ranked_levels(
        &self,
        query: &str,
        embedder: &dyn EmbeddingProvider,
        cfg: &RetrievalConfig,
    ) -> Result<Vec<(UnitRef, f64)>, RetrievalError> {
        cfg.validate()?;
        if self.units.is_empty() {
            return Ok(Vec::new());
        }
        let qv = self.embed_query(query, embedder)?;
        Ok(self.rank(query, &qv, cfg))
    }

    fn top_down(
        &self,
        query: &str,
        embedder: &dyn EmbeddingProvider,
        cfg: &RetrievalConfig,
        q: LevelQuotas,
    ) -> Result<RetrievedSet, RetrievalError> {
        let ranked = self.ranked_levels(query, embedder, cfg)?;
        let initial = |unit: UnitRef, score: f64| RetrievalUnit {
            unit,
            score,
            origin: Origin::Initial,
            source: None,
        };
        let mut units: Vec<RetrievalUnit> = ranked
            .iter()
            .filter(|(u, _)| matches!(u, UnitRef::Persona(_)))
            .take(q.persona)
            .map(|&(u, s)| initial(u, s))
            .collect();
        let scenes: Vec<(UnitRef, f64)> = ranked
            .iter()
            .filter(|(u, _)| matches!(u, UnitRef::Scene(_)))
            .take(q.scene)
            .copied()
            .collect();
        units.extend(scenes.iter().map(|&(u, s)| initial(u, s)));
        // facts come only through association with the selected scenes
        let mut candidates = Vec::new();
        for (rank, (u, _)) in scenes.iter().enumerate() {
            if let UnitRef::Scene(s) = *u {
                for (f, score) in self.scene_members_ranked(s)? {
                    candidates.push((rank, f, score, *u));
                }
            }
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        units.extend(candidates.into_iter().take(q.fact).map(|(_, f, score, src)| RetrievalUnit {
            unit: UnitRef::Fact(f),
            score,
            origin: Origin::SpreadFromScene,
            source: Some(src),
        }));
        Ok(RetrievedSet { units })
    }

    fn bottom_up(
        &self,
        query: &str,
        embedder: &dyn EmbeddingProvider,
        cfg: &RetrievalConfig,
        q: LevelQuotas,
    ) -> Result<RetrievedSet, RetrievalError> {
        let ranked = self.ranked_levels(query, embedder, cfg)?;
        let facts: Vec<RetrievalUnit> = ranked
            .iter()
            .filter(|(u, _)| matches!(u, UnitRef::Fact(_)))
            .take(q.fact)
            .map(|&(unit, score)| RetrievalUnit {
                unit,
                score,
                origin: Origin::Initial,
                source: None,
            })
            .collect();
        let mut set = self.spread_activation(
            &facts,
            0,
            Spread {
                fact_to_scene: true,
                scene_to_fact: false,
            },
        )?;
        let scene_count = set.units.iter().filter(|u| u.unit.level() == Level::Scene).count();
        if scene_count > q.scene {
            let mut kept = 0;
            set.units.retain(|u| {
                if u.unit.level() != Level::Scene {
                    return true;
                }
                kept += 1;
                kept <= q.scene
            });
        }
        set.units.extend(
            ranked
                .iter()
                .filter(|(u, _)| matches!(u, UnitRef::Persona(_)))
                .take(q.persona)
                .map(|&(unit, score)| RetrievalUnit {
                    unit,
                    score,
                    origin: Origin::Initial,
                    source: None,
                }),
        );
        Ok(set)
    }
}

/// Sorts units by score descending, breaking ties by `UnitRef` order.
pub fn rank_by(units: &[UnitRef], scores: &[f64]) -> Vec<(UnitRef, f64)> {
    let mut ranked: Vec<(UnitRef, f64)> = units.iter().copied().zip(scores.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Convenience wrapper building a [`Retriever`] for a single query.
pub fn retrieve(
    query: &str,
    bank: &MemoryBank,
    embedder: &dyn EmbeddingProvider,
    cfg: &RetrievalConfig,
) -> Result<RetrievedSet, RetrievalError> {
    Retriever::new(bank).retrieve(query, embedder, cfg)
}
