//! Bidirectional memory construction: a bottom-up inductive pass
//! (facts, graph, clusters, scenes, persona) followed by a top-down
//! reflective pass that calibrates each scene against the persona.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_text, embed_texts, mean_vector, EmbedError, EmbeddingProvider};
use crate::graph::{build_edges, lpa_cluster, GraphError, DEFAULT_LPA_MAX_ITERS, DEFAULT_TAU};
use crate::model::{FactId, FactUnit, MemoryBank, PersonaDimension, PersonaEntry, PersonaProfile, Provenance, SceneUnit};
use crate::operators::{self, ChatBackend, Interaction, OperatorError};
use crate::retrieval::RetrievalConfig;
use crate::text::word_count;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn: u64,
    #[serde(default)]
    pub speaker: String,
    #[serde(default)]
    pub query: String,
    #[serde(default)]
    pub response: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConversationError {
    #[error("conversation {0} has no turns")]
    Empty(String),
    #[error("conversation {conversation}: turn {turn} does not follow turn {previous}")]
    TurnOrder { conversation: String, previous: u64, turn: u64 },
    #[error("conversation {conversation}: turn {turn} has a malformed timestamp {timestamp:?}")]
    Timestamp {
        conversation: String,
        turn: u64,
        timestamp: String,
    },
    #[error("conversation {conversation}: turn {turn} has neither query nor response")]
    EmptyTurn { conversation: String, turn: u64 },
}

/// Accepts RFC 3339, a naive `YYYY-MM-DDTHH:MM[:SS[.f]]` date-time, or a bare date.
pub fn is_iso8601(ts: &str) -> bool {
    use chrono::{DateTime, NaiveDate, NaiveDateTime};
    let ts = ts.trim();
    DateTime::parse_from_rfc3339(ts).is_ok()
        || [
            "%Y-%m-%dT%H:%M:%S%.f",
            "%Y-%m-%dT%H:%M",
            "%Y-%m-%d %H:%M:%S%.f",
            "%Y-%m-%d %H:%M",
        ]
        .iter()
        .any(|f| NaiveDateTime::parse_from_str(ts, f).is_ok())
        || NaiveDate::parse_from_str(ts, "%Y-%m-%d").is_ok()
}

impl Conversation {
    pub fn validate(&self) -> Result<(), ConversationError> {
        if self.turns.is_empty() {
            return Err(ConversationError::Empty(self.id.clone()));
        }
        let mut previous: Option<u64> = None;
        for t in &self.turns {
            if let Some(p) = previous {
                if t.turn <= p {
                    return Err(ConversationError::TurnOrder {
                        conversation: self.id.clone(),
                        previous: p,
                        turn: t.turn,
                    });
                }
            }
            previous = Some(t.turn);
            if !is_iso8601(&t.timestamp) {
                return Err(ConversationError::Timestamp {
                    conversation: self.id.clone(),
                    turn: t.turn,
                    timestamp: t.timestamp.clone(),
                });
            }
            if t.query.trim().is_empty() && t.response.trim().is_empty() {
                return Err(ConversationError::EmptyTurn {
                    conversation: self.id.clone(),
                    turn: t.turn,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionConfig {
    pub tau: f64,
    pub lpa_max_iters: usize,
    pub seed: u64,
    /// Bound on concurrent fact extraction calls.
    pub max_in_flight: usize,
    /// Word budget for the scene text handed to persona distillation.
    pub persona_budget: usize,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lpa_max_iters: DEFAULT_LPA_MAX_ITERS,
            seed: 0,
            max_in_flight: 4,
            persona_budget: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validate,
    Extract,
    Embed,
    Graph,
    Aggregate,
    Distill,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Validate => "validate",
            Stage::Extract => "fact extraction",
            Stage::Embed => "embedding",
            Stage::Graph => "fact graph",
            Stage::Aggregate => "scene aggregation",
            Stage::Distill => "persona distillation",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
#[error("construction failed during {stage}: {source}")]
pub struct ConstructionError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

impl ConstructionError {
    fn at(stage: Stage) -> impl FnOnce(StageError) -> Self {
        move |source| Self { stage, source }
    }

    pub fn is_backend(&self) -> bool {
        match &self.source {
            StageError::Operator(OperatorError::Input(_)) => false,
            StageError::Operator(_) => true,
            StageError::Embed(e) => !matches!(e, EmbedError::EmptyInput),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InductiveOutput {
    pub facts: Vec<FactUnit>,
    pub scenes: Vec<SceneUnit>,
    pub persona: PersonaProfile,
    pub warnings: Vec<String>,
}

/// Bottom-up pass: one fact per turn, similarity graph, clusters, scenes, persona.
pub fn inductive_pass(
    conv: &Conversation,
    cfg: &ConstructionConfig,
    embedder: &dyn EmbeddingProvider,
    backend: &dyn ChatBackend,
) -> Result<InductiveOutput, ConstructionError> {
    conv.validate()
        .map_err(|e| ConstructionError::at(Stage::Validate)(e.into()))?;
    let mut warnings = Vec::new();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight.max(1))
        .build()
        .expect("thread pool");
    let drafts = pool
        .install(|| {
            conv.turns
                .par_iter()
                .map(|t| {
                    operators::extract_fact(
                        backend,
                        &Interaction {
                            speaker: t.speaker.clone(),
                            query: t.query.clone(),
                            response: t.response.clone(),
                        },
                    )
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(|e| ConstructionError::at(Stage::Extract)(e.into()))?;

    let contexts: Vec<&str> = drafts.iter().map(|d| d.context.as_str()).collect();
    let embeddings = embed_texts(embedder, &contexts).map_err(|e| ConstructionError::at(Stage::Embed)(e.into()))?;
    let mut facts: Vec<FactUnit> = conv
        .turns
        .iter()
        .zip(drafts)
        .zip(embeddings)
        .map(|((t, d), embedding)| FactUnit {
            id: t.turn,
            content: d.context,
            keywords: d.keywords,
            tags: d.tags,
            timestamp: t.timestamp.clone(),
            edges: Default::default(),
            embedding,
        })
        .collect();

    let graph = build_edges(&mut facts, cfg.tau).map_err(|e| ConstructionError::at(Stage::Graph)(e.into()))?;
    let clustering = lpa_cluster(&graph, cfg.lpa_max_iters, cfg.seed);

    let by_id: BTreeMap<FactId, &FactUnit> = facts.iter().map(|f| (f.id, f)).collect();
    let mut scenes = Vec::with_capacity(clustering.len());
    for (j, members) in clustering.clusters.iter().enumerate() {
        let member_facts: Vec<&FactUnit> = members.iter().map(|id| by_id[id]).collect();
        let draft =
            operators::aggregate_scene(backend, &member_facts).map_err(|e| ConstructionError::at(Stage::Aggregate)(e.into()))?;
        let embedding = if draft.scene_memory.trim().is_empty() {
            warnings.push(format!("scene {j}: empty aggregation, using the mean fact embedding"));
            mean_vector(member_facts.iter().map(|f| f.embedding.as_slice())).expect("non-empty cluster")
        } else {
            embed_text(embedder, &draft.scene_memory).map_err(|e| ConstructionError::at(Stage::Embed)(e.into()))?
        };
        scenes.push(SceneUnit {
            id: j as u64,
            summary: draft.scene_memory,
            keywords: draft.keywords,
            tags: draft.tags,
            members: members.clone(),
            delta: None,
            embedding,
        });
    }

    let persona = distill_persona(&scenes, cfg, embedder, backend, &mut warnings)?;
    Ok(InductiveOutput {
        facts,
        scenes,
        persona,
        warnings,
    })
}

fn distill_persona(
    scenes: &[SceneUnit],
    cfg: &ConstructionConfig,
    embedder: &dyn EmbeddingProvider,
    backend: &dyn ChatBackend,
    warnings: &mut Vec<String>,
) -> Result<PersonaProfile, ConstructionError> {
    // scene ids follow the earliest member turn, so dropping from the front drops the oldest
    let mut start = 0;
    let mut total: usize = scenes.iter().map(|s| word_count(&s.text())).sum();
    while total > cfg.persona_budget && start + 1 < scenes.len() {
        total -= word_count(&scenes[start].text());
        start += 1;
    }
    if start > 0 {
        warnings.push(format!(
            "persona distillation: dropped the {start} oldest scenes to fit {} words",
            cfg.persona_budget
        ));
    }
    let context: Vec<&SceneUnit> = scenes[start..].iter().collect();

    let mut texts = Vec::with_capacity(5);
    for dim in PersonaDimension::ALL {
        let text = operators::distill_persona_dimension(backend, &context, dim)
            .map_err(|e| ConstructionError::at(Stage::Distill)(e.into()))?;
        texts.push(text);
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embeddings = embed_texts(embedder, &refs).map_err(|e| ConstructionError::at(Stage::Embed)(e.into()))?;
    Ok(PersonaProfile {
        dimensions: PersonaDimension::ALL
            .into_iter()
            .zip(texts.into_iter().zip(embeddings))
            .map(|(d, (text, embedding))| (d, PersonaEntry { text, embedding }))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectiveOutput {
    pub scenes: Vec<SceneUnit>,
    pub calibrated: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Top-down pass: asks the backend whether each scene needs a compensatory
/// condition and appends it when so. Facts are never touched; failures
/// leave the scene as it was and are reported as warnings.
pub fn reflective_pass(
    scenes: Vec<SceneUnit>,
    persona: &PersonaProfile,
    embedder: &dyn EmbeddingProvider,
    backend: &dyn ChatBackend,
) -> ReflectiveOutput {
    let mut out = Vec::with_capacity(scenes.len());
    let mut calibrated = Vec::new();
    let mut warnings = Vec::new();
    for scene in scenes {
        let verdict = match backend.calibrate_scene(&scene, persona) {
            Ok(v) => v,
            Err(e) => {
                warn!("scene {}: calibration failed: {e}", scene.id);
                warnings.push(format!("scene {}: calibration failed: {e}", scene.id));
                out.push(scene);
                continue;
            }
        };
        let (verdict, dropped) = verdict.sanitize();
        if dropped {
            warn!("scene {}: calibration requested with an empty condition; ignored", scene.id);
            warnings.push(format!(
                "scene {}: calibration requested with an empty condition; ignored",
                scene.id
            ));
        }
        if !verdict.needs_calibration {
            out.push(scene);
            continue;
        }
        let mut updated = scene.clone();
        updated.delta = Some(verdict.added_condition);
        match embed_text(embedder, &updated.text()) {
            Ok(e) => {
                updated.embedding = e;
                calibrated.push(updated.id);
                out.push(updated);
            }
            Err(e) => {
                warnings.push(format!("scene {}: re-embedding calibrated text failed: {e}", scene.id));
                out.push(scene);
            }
        }
    }
    ReflectiveOutput {
        scenes: out,
        calibrated,
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constructed {
    pub bank: MemoryBank,
    pub warnings: Vec<String>,
}

/// Full construction: inductive pass, then reflective calibration.
pub fn construct_memory(
    conv: &Conversation,
    cfg: &ConstructionConfig,
    embedder: &dyn EmbeddingProvider,
    backend: &dyn ChatBackend,
) -> Result<Constructed, ConstructionError> {
    let inductive = inductive_pass(conv, cfg, embedder, backend)?;
    let reflective = reflective_pass(inductive.scenes, &inductive.persona, embedder, backend);
    let defaults = RetrievalConfig::default();
    let bank = MemoryBank {
        dimension: embedder.dimension(),
        facts: inductive.facts.into_iter().map(|f| (f.id, f)).collect(),
        scenes: reflective.scenes.into_iter().map(|s| (s.id, s)).collect(),
        persona: inductive.persona,
        provenance: Provenance {
            conversation_id: conv.id.clone(),
            tau: cfg.tau,
            lpa_max_iters: cfg.lpa_max_iters,
            seed: cfg.seed,
            alpha: defaults.alpha,
            k: defaults.k,
            m: defaults.m,
            embedder: embedder.name(),
            backend: backend.name(),
        },
    };
    let mut warnings = inductive.warnings;
    warnings.extend(reflective.warnings);
    Ok(Constructed { bank, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::model::validate_bank;
    use crate::operators::{CalibrationVerdict, FactDraft, MockBackend, SceneDraft};
    use std::collections::BTreeSet;

    pub(crate) fn conv(texts: &[&str]) -> Conversation {
        Conversation {
            id: "c1".into(),
            turns: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Turn {
                    turn: i as u64,
                    speaker: "Caroline".into(),
                    query: t.to_string(),
                    response: "ok".into(),
                    timestamp: format!("2023-05-{:02}T10:00:00", i + 1),
                })
                .collect(),
        }
    }

    /// Mock that calibrates selected scenes with a fixed delta.
    struct Calibrating {
        targets: BTreeSet<u64>,
        delta: &'static str,
    }

    impl ChatBackend for Calibrating {
        fn name(&self) -> String {
            "calibrating".into()
        }
        fn extract_fact(&self, i: &Interaction) -> Result<FactDraft, OperatorError> {
            MockBackend.extract_fact(i)
        }
        fn aggregate_scene(&self, f: &[&FactUnit]) -> Result<SceneDraft, OperatorError> {
            MockBackend.aggregate_scene(f)
        }
        fn distill_persona_dimension(&self, s: &[&SceneUnit], d: PersonaDimension) -> Result<String, OperatorError> {
            MockBackend.distill_persona_dimension(s, d)
        }
        fn calibrate_scene(&self, s: &SceneUnit, _: &PersonaProfile) -> Result<CalibrationVerdict, OperatorError> {
            if self.targets.contains(&s.id) {
                Ok(CalibrationVerdict {
                    needs_calibration: true,
                    added_condition: self.delta.into(),
                    reason: "stub".into(),
                })
            } else {
                Ok(CalibrationVerdict::consistent("stub"))
            }
        }
        fn generate_answer(&self, q: &str, c: &str) -> Result<String, OperatorError> {
            MockBackend.generate_answer(q, c)
        }
    }

    fn connected_components(facts: &[FactUnit]) -> Vec<BTreeSet<u64>> {
        let mut seen = BTreeSet::new();
        let mut comps = Vec::new();
        let by_id: BTreeMap<u64, &FactUnit> = facts.iter().map(|f| (f.id, f)).collect();
        for f in facts {
            if seen.contains(&f.id) {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![f.id];
            while let Some(n) = stack.pop() {
                if seen.insert(n) {
                    comp.insert(n);
                    stack.extend(by_id[&n].edges.iter().copied());
                }
            }
            comps.push(comp);
        }
        comps
    }

    #[test]
    fn single_interaction_pipeline() {
        let out = inductive_pass(
            &conv(&["I adopted a puppy"]),
            &Default::default(),
            &HashEmbedder::default(),
            &MockBackend,
        )
        .unwrap();
        assert_eq!(out.facts.len(), 1);
        assert_eq!(out.scenes.len(), 1);
        assert_eq!(out.scenes[0].members, [0].into());
        assert_eq!(out.persona.dimensions.len(), 5);
    }

    #[test]
    fn two_cliques_give_two_scenes() {
        let c = conv(&[
            "hiking mountains trail summit",
            "pottery clay kiln glaze",
            "hiking mountains trail boots",
            "pottery clay kiln wheel",
            "hiking mountains trail weather",
            "pottery clay kiln class",
        ]);
        let out = inductive_pass(&c, &Default::default(), &HashEmbedder::default(), &MockBackend).unwrap();
        let comps = connected_components(&out.facts);
        assert_eq!(comps, vec![[0, 2, 4].into(), [1, 3, 5].into()]);
        let members: Vec<_> = out.scenes.iter().map(|s| s.members.clone()).collect();
        assert_eq!(members, comps);
        assert_eq!(out.scenes[0].id, 0);
        assert!(out.persona.get(PersonaDimension::Interests).unwrap().text.contains("hiking"));
    }

    #[test]
    fn orthogonal_interactions_give_singletons() {
        let c = conv(&["apples", "bicycles", "volcanoes", "umbrellas"]);
        let out = inductive_pass(&c, &Default::default(), &HashEmbedder::default(), &MockBackend).unwrap();
        assert!(out.facts.iter().all(|f| f.edges.is_empty()));
        assert_eq!(out.scenes.len(), 4);
    }

    #[test]
    fn invalid_conversation_is_rejected_at_validate() {
        let mut c = conv(&["a", "b"]);
        c.turns[1].turn = 0;
        let err = construct_memory(&c, &Default::default(), &HashEmbedder::default(), &MockBackend).unwrap_err();
        assert_eq!(err.stage, Stage::Validate);
        let mut c = conv(&["a"]);
        c.turns[0].timestamp = "yesterday".into();
        let err = construct_memory(&c, &Default::default(), &HashEmbedder::default(), &MockBackend).unwrap_err();
        assert!(err.to_string().contains("turn 0"), "{err}");
        assert!(conv(&[]).validate().is_err());
    }

    #[test]
    fn timestamps_accept_common_iso_forms() {
        for ok in [
            "2023-05-08T13:56:00",
            "2023-05-08T13:56:00Z",
            "2023-05-08T13:56:00+02:00",
            "2023-05-08",
            "2023-05-08 13:56",
        ] {
            assert!(is_iso8601(ok), "{ok}");
        }
        for bad in ["1:56 pm on 8 May, 2023", "2023-13-01", ""] {
            assert!(!is_iso8601(bad), "{bad}");
        }
    }

    #[test]
    fn mock_reflective_pass_is_identity() {
        let c = conv(&["hiking trail", "hiking trail boots", "clay kiln"]);
        let e = HashEmbedder::default();
        let out = inductive_pass(&c, &Default::default(), &e, &MockBackend).unwrap();
        let r = reflective_pass(out.scenes.clone(), &out.persona, &e, &MockBackend);
        assert_eq!(r.scenes, out.scenes);
        assert!(r.calibrated.is_empty() && r.warnings.is_empty());
    }

    #[test]
    fn stub_delta_calibrates_only_target_scene() {
        let c = conv(&["hiking trail", "hiking trail boots", "clay kiln"]);
        let e = HashEmbedder::default();
        let out = inductive_pass(&c, &Default::default(), &e, &MockBackend).unwrap();
        let stub = Calibrating {
            targets: [0].into(),
            delta: "D",
        };
        let r = reflective_pass(out.scenes.clone(), &out.persona, &e, &stub);
        assert!(r.scenes[0].text().ends_with(" D"));
        assert_ne!(r.scenes[0].embedding, out.scenes[0].embedding);
        assert_eq!(r.scenes[1], out.scenes[1]);
        assert_eq!(r.calibrated, vec![0]);
    }

    #[test]
    fn empty_condition_is_coerced_with_warning() {
        let c = conv(&["hiking trail"]);
        let e = HashEmbedder::default();
        let out = inductive_pass(&c, &Default::default(), &e, &MockBackend).unwrap();
        let stub = Calibrating {
            targets: [0].into(),
            delta: "",
        };
        let r = reflective_pass(out.scenes.clone(), &out.persona, &e, &stub);
        assert_eq!(r.scenes, out.scenes);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn teaser_calibration_injects_persona_condition() {
        let c = conv(&[
            "Dinner with friends at the spicy Sichuan restaurant downtown",
            "Friends ordered extra spicy Sichuan dishes at the restaurant",
        ]);
        let e = HashEmbedder::default();
        let stub = Calibrating {
            targets: [0].into(),
            delta: "This aligns with her mild taste: she prefers mild dishes even when friends order spicy food.",
        };
        let built = construct_memory(&c, &Default::default(), &e, &stub).unwrap();
        let scene = &built.bank.scenes[&0];
        assert!(scene.text().contains("mild taste"));
        assert!(validate_bank(&built.bank).is_empty());
    }

    #[test]
    fn construction_is_deterministic_and_valid() {
        let c = conv(&[
            "hiking trail",
            "hiking trail boots",
            "clay kiln",
            "clay kiln glaze",
            "my sister visited",
        ]);
        let e = HashEmbedder::default();
        let a = construct_memory(&c, &Default::default(), &e, &MockBackend).unwrap();
        let b = construct_memory(&c, &Default::default(), &e, &MockBackend).unwrap();
        assert_eq!(a, b);
        assert!(validate_bank(&a.bank).is_empty());
        let total: usize = a.bank.scenes.values().map(|s| s.members.len()).sum();
        assert_eq!(total, 5);
        assert_eq!(a.bank.provenance.embedder, "hash-384");
        assert_eq!(a.bank.provenance.backend, "mock");
    }

    #[test]
    fn persona_budget_drops_oldest_scenes() {
        let c = conv(&["apples oranges", "bicycles wheels", "volcanoes lava"]);
        let cfg = ConstructionConfig {
            persona_budget: 2,
            ..Default::default()
        };
        let out = inductive_pass(&c, &cfg, &HashEmbedder::default(), &MockBackend).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("2 oldest"));
    }
}
