//! Three-level memory model: facts, scenes and the persona profile.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub type FactId = u64;
pub type SceneId = u64;

/// Atomic memory unit, one per conversational interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactUnit {
    pub id: FactId,
    /// Summarized interaction content.
    pub content: String,
    pub keywords: Vec<String>,
    pub tags: Vec<String>,
    /// ISO-8601 timestamp copied from the interaction metadata.
    pub timestamp: String,
    /// Ids of similar facts. Symmetric across the bank, never contains `id`.
    pub edges: BTreeSet<FactId>,
    pub embedding: Vec<f64>,
}

/// Thematic aggregation over a cluster of facts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneUnit {
    pub id: SceneId,
    pub summary: String,
    pub keywords: Vec<String>,
    pub tags: Vec<String>,
    pub members: BTreeSet<FactId>,
    /// Compensatory condition appended by the reflective pass.
    pub delta: Option<String>,
    /// Embedding of [`SceneUnit::text`].
    pub embedding: Vec<f64>,
}

impl SceneUnit {
    /// Calibrated scene text: the summary, followed by the delta when present.
    pub fn text(&self) -> String {
        scene_text(&self.summary, self.delta.as_deref())
    }
}

pub fn scene_text(summary: &str, delta: Option<&str>) -> String {
    match delta {
        Some(d) => format!("{summary} {d}"),
        None => summary.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaDimension {
    BasicInfo,
    Interests,
    Personality,
    Values,
    Relationships,
}

impl PersonaDimension {
    pub const ALL: [PersonaDimension; 5] = [
        PersonaDimension::BasicInfo,
        PersonaDimension::Interests,
        PersonaDimension::Personality,
        PersonaDimension::Values,
        PersonaDimension::Relationships,
    ];

    pub fn key(self) -> &'static str {
        match self {
            PersonaDimension::BasicInfo => "basic_info",
            PersonaDimension::Interests => "interests",
            PersonaDimension::Personality => "personality",
            PersonaDimension::Values => "values",
            PersonaDimension::Relationships => "relationships",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.key() == key)
    }

    /// Position in the fixed dimension order, used as the id for tie-breaking.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PersonaDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaEntry {
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PersonaProfile {
    pub dimensions: BTreeMap<PersonaDimension, PersonaEntry>,
}

impl PersonaProfile {
    pub fn get(&self, dim: PersonaDimension) -> Option<&PersonaEntry> {
        self.dimensions.get(&dim)
    }

    /// Lines of `key: text`, in dimension order.
    pub fn render(&self) -> String {
        self.dimensions
            .iter()
            .map(|(d, e)| format!("{}: {}", d.key(), e.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Configuration snapshot recorded with a bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub conversation_id: String,
    pub tau: f64,
    pub lpa_max_iters: usize,
    pub seed: u64,
    pub alpha: f64,
    pub k: usize,
    pub m: usize,
    pub embedder: String,
    pub backend: String,
}

/// The hierarchical store: facts, calibrated scenes and the persona.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub dimension: usize,
    pub facts: BTreeMap<FactId, FactUnit>,
    pub scenes: BTreeMap<SceneId, SceneUnit>,
    pub persona: PersonaProfile,
    pub provenance: Provenance,
}

impl MemoryBank {
    /// Maps each fact to the scene containing it.
    pub fn fact_to_scene(&self) -> BTreeMap<FactId, SceneId> {
        let mut map = BTreeMap::new();
        for scene in self.scenes.values() {
            for &f in &scene.members {
                map.entry(f).or_insert(scene.id);
            }
        }
        map
    }

    pub fn edge_count(&self) -> usize {
        self.facts.values().map(|f| f.edges.len()).sum::<usize>() / 2
    }

    pub fn contains(&self, unit: UnitRef) -> bool {
        match unit {
            UnitRef::Fact(id) => self.facts.contains_key(&id),
            UnitRef::Scene(id) => self.scenes.contains_key(&id),
            UnitRef::Persona(d) => self.persona.dimensions.contains_key(&d),
        }
    }

    /// Checks every structural invariant, returning one entry per violation.
    pub fn validate(&self) -> Vec<Violation> {
        validate_bank(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    Partition,
    Symmetry,
    SelfLoop,
    DanglingReference,
    EmptyScene,
    IdMismatch,
    Dimension,
    NonFinite,
    Persona,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Partition => "partition",
            Rule::Symmetry => "symmetry",
            Rule::SelfLoop => "self-loop",
            Rule::DanglingReference => "dangling-reference",
            Rule::EmptyScene => "empty-scene",
            Rule::IdMismatch => "id-mismatch",
            Rule::Dimension => "dimension",
            Rule::NonFinite => "non-finite",
            Rule::Persona => "persona",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: Rule,
    pub detail: String,
}

impl Violation {
    fn new(rule: Rule, detail: impl Into<String>) -> Self {
        Self {
            rule,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule.name(), self.detail)
    }
}

fn check_vector(out: &mut Vec<Violation>, what: &str, v: &[f64], dim: usize) {
    if v.len() != dim {
        out.push(Violation::new(
            Rule::Dimension,
            format!("{what} embedding has length {}, bank dimension is {dim}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        out.push(Violation::new(
            Rule::NonFinite,
            format!("{what} embedding has a non-finite entry"),
        ));
    }
}

pub fn validate_bank(bank: &MemoryBank) -> Vec<Violation> {
    let mut out = Vec::new();
    let dim = bank.dimension;
    if dim == 0 {
        out.push(Violation::new(Rule::Dimension, "bank dimension is 0"));
    }

    for (&key, fact) in &bank.facts {
        if key != fact.id {
            out.push(Violation::new(
                Rule::IdMismatch,
                format!("fact keyed {key} carries id {}", fact.id),
            ));
        }
        check_vector(&mut out, &format!("fact {}", fact.id), &fact.embedding, dim);
        for &l in &fact.edges {
            if l == fact.id {
                out.push(Violation::new(
                    Rule::SelfLoop,
                    format!("fact {} has an edge to itself", fact.id),
                ));
                continue;
            }
            match bank.facts.get(&l) {
                None => out.push(Violation::new(
                    Rule::DanglingReference,
                    format!("fact {} has an edge to missing fact {l}", fact.id),
                )),
                Some(other) if !other.edges.contains(&fact.id) => out.push(Violation::new(
                    Rule::Symmetry,
                    format!("fact {} links to fact {l} but fact {l} does not link back", fact.id),
                )),
                Some(_) => {}
            }
        }
    }

    let mut owner: BTreeMap<FactId, SceneId> = BTreeMap::new();
    for (&key, scene) in &bank.scenes {
        if key != scene.id {
            out.push(Violation::new(
                Rule::IdMismatch,
                format!("scene keyed {key} carries id {}", scene.id),
            ));
        }
        if scene.members.is_empty() {
            out.push(Violation::new(Rule::EmptyScene, format!("scene {} has no members", scene.id)));
        }
        check_vector(&mut out, &format!("scene {}", scene.id), &scene.embedding, dim);
        for &f in &scene.members {
            if !bank.facts.contains_key(&f) {
                out.push(Violation::new(
                    Rule::DanglingReference,
                    format!("scene {} lists missing fact {f}", scene.id),
                ));
            }
            if let Some(prev) = owner.insert(f, scene.id) {
                out.push(Violation::new(
                    Rule::Partition,
                    format!("fact {f} belongs to scenes {prev} and {}", scene.id),
                ));
            }
        }
    }
    for &id in bank.facts.keys() {
        if !owner.contains_key(&id) {
            out.push(Violation::new(Rule::Partition, format!("fact {id} belongs to no scene")));
        }
    }

    for d in PersonaDimension::ALL {
        match bank.persona.get(d) {
            None => out.push(Violation::new(Rule::Persona, format!("persona dimension {d} is missing"))),
            Some(entry) => {
                if entry.text.trim().is_empty() {
                    out.push(Violation::new(Rule::Persona, format!("persona dimension {d} has empty text")));
                }
                check_vector(&mut out, &format!("persona {d}"), &entry.embedding, dim);
            }
        }
    }
    out
}

/// Evaluated question types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    SingleHop,
    MultiHop,
    Temporal,
    OpenDomain,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 4] = [
        QuestionCategory::SingleHop,
        QuestionCategory::MultiHop,
        QuestionCategory::Temporal,
        QuestionCategory::OpenDomain,
    ];

    pub fn key(self) -> &'static str {
        match self {
            QuestionCategory::SingleHop => "single_hop",
            QuestionCategory::MultiHop => "multi_hop",
            QuestionCategory::Temporal => "temporal",
            QuestionCategory::OpenDomain => "open_domain",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.key() == key)
    }
}

impl fmt::Display for QuestionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Memory level. Declaration order is the tie-break order in rankings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Persona,
    Scene,
    Fact,
}

/// Reference to a single memory unit at any level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "level", content = "ref_id", rename_all = "snake_case")]
pub enum UnitRef {
    Persona(PersonaDimension),
    Scene(SceneId),
    Fact(FactId),
}

impl UnitRef {
    pub fn level(self) -> Level {
        match self {
            UnitRef::Persona(_) => Level::Persona,
            UnitRef::Scene(_) => Level::Scene,
            UnitRef::Fact(_) => Level::Fact,
        }
    }
}

impl fmt::Display for UnitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitRef::Persona(d) => write!(f, "persona/{d}"),
            UnitRef::Scene(id) => write!(f, "scene/{id}"),
            UnitRef::Fact(id) => write!(f, "fact/{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    SpreadFromFact,
    SpreadFromScene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalUnit {
    #[serde(flatten)]
    pub unit: UnitRef,
    pub score: f64,
    pub origin: Origin,
    /// The initial unit this one was spread from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<UnitRef>,
}

/// Deduplicated retrieval result: initial units first, then spread units.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub units: Vec<RetrievalUnit>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn contains(&self, unit: UnitRef) -> bool {
        self.units.iter().any(|u| u.unit == unit)
    }

    pub fn fact_ids(&self) -> BTreeSet<FactId> {
        self.units
            .iter()
            .filter_map(|u| match u.unit {
                UnitRef::Fact(id) => Some(id),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fact(id: FactId, edges: &[FactId]) -> FactUnit {
        FactUnit {
            id,
            content: format!("fact {id}"),
            keywords: vec![],
            tags: vec![],
            timestamp: "2023-05-08T13:56:00".into(),
            edges: edges.iter().copied().collect(),
            embedding: vec![1.0, 0.0],
        }
    }

    fn scene(id: SceneId, members: &[FactId]) -> SceneUnit {
        SceneUnit {
            id,
            summary: format!("scene {id}"),
            keywords: vec![],
            tags: vec![],
            members: members.iter().copied().collect(),
            delta: None,
            embedding: vec![0.0, 1.0],
        }
    }

    pub(crate) fn persona() -> PersonaProfile {
        PersonaProfile {
            dimensions: PersonaDimension::ALL
                .into_iter()
                .map(|d| {
                    (
                        d,
                        PersonaEntry {
                            text: format!("{d} text"),
                            embedding: vec![1.0, 1.0],
                        },
                    )
                })
                .collect(),
        }
    }

    fn bank(facts: Vec<FactUnit>, scenes: Vec<SceneUnit>) -> MemoryBank {
        MemoryBank {
            dimension: 2,
            facts: facts.into_iter().map(|f| (f.id, f)).collect(),
            scenes: scenes.into_iter().map(|s| (s.id, s)).collect(),
            persona: persona(),
            provenance: Provenance {
                conversation_id: "c".into(),
                tau: 0.2,
                lpa_max_iters: 20,
                seed: 0,
                alpha: 0.5,
                k: 30,
                m: 3,
                embedder: "test".into(),
                backend: "test".into(),
            },
        }
    }

    #[test]
    fn valid_bank_has_no_violations() {
        let b = bank(
            vec![fact(0, &[1]), fact(1, &[0]), fact(2, &[])],
            vec![scene(0, &[0, 1]), scene(1, &[2])],
        );
        assert!(b.validate().is_empty(), "{:?}", b.validate());
    }

    #[test]
    fn fact_in_two_scenes_is_a_partition_violation() {
        let b = bank(
            vec![fact(0, &[]), fact(1, &[]), fact(2, &[]), fact(3, &[])],
            vec![scene(0, &[0, 1, 3]), scene(1, &[2, 3])],
        );
        let v = b.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, Rule::Partition);
        assert!(v[0].detail.contains("fact 3"));
    }

    #[test]
    fn one_sided_edge_is_a_symmetry_violation() {
        let facts: Vec<_> = (0..6).map(|i| if i == 2 { fact(2, &[5]) } else { fact(i, &[]) }).collect();
        let b = bank(facts, vec![scene(0, &[0, 1, 2, 3, 4, 5])]);
        let v = b.validate();
        // pairwise scan oracle: exactly the (2,5) pair is asymmetric
        let mut asym = 0;
        for f in b.facts.values() {
            for g in b.facts.values() {
                if f.edges.contains(&g.id) && !g.edges.contains(&f.id) {
                    asym += 1;
                }
            }
        }
        assert_eq!(asym, 1);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, Rule::Symmetry);
    }

    #[test]
    fn uncovered_fact_self_loop_and_bad_dimension_are_reported() {
        let mut f1 = fact(1, &[1]);
        f1.embedding = vec![1.0];
        let b = bank(vec![fact(0, &[]), f1], vec![scene(0, &[0])]);
        let rules: Vec<Rule> = b.validate().iter().map(|v| v.rule).collect();
        assert!(rules.contains(&Rule::Partition));
        assert!(rules.contains(&Rule::SelfLoop));
        assert!(rules.contains(&Rule::Dimension));
    }

    #[test]
    fn missing_persona_dimension_is_reported() {
        let mut b = bank(vec![fact(0, &[])], vec![scene(0, &[0])]);
        b.persona.dimensions.remove(&PersonaDimension::Values);
        let v = b.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, Rule::Persona);
    }

    #[test]
    fn scene_text_appends_delta_with_one_space() {
        assert_eq!(scene_text("S", None), "S");
        assert_eq!(scene_text("S", Some("D")), "S D");
        let mut s = scene(0, &[0]);
        s.summary = "camping trip plans".into();
        s.delta = Some("This aligns with her love of nature".into());
        assert_eq!(s.text(), "camping trip plans This aligns with her love of nature");
        assert_eq!(s.text(), s.text());
    }

    #[test]
    fn unit_ref_orders_persona_before_scene_before_fact() {
        let mut v = vec![
            UnitRef::Fact(0),
            UnitRef::Scene(3),
            UnitRef::Persona(PersonaDimension::Values),
            UnitRef::Scene(1),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                UnitRef::Persona(PersonaDimension::Values),
                UnitRef::Scene(1),
                UnitRef::Scene(3),
                UnitRef::Fact(0)
            ]
        );
    }

    #[test]
    fn unit_ref_serializes_with_level_and_ref_id() {
        let json = serde_json::to_string(&UnitRef::Fact(4)).unwrap();
        assert_eq!(json, r#"{"level":"fact","ref_id":4}"#);
        let json = serde_json::to_string(&UnitRef::Persona(PersonaDimension::BasicInfo)).unwrap();
        assert_eq!(json, r#"{"level":"persona","ref_id":"basic_info"}"#);
    }
}
