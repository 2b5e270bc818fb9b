//! LLM-backed memory operators: fact extraction, scene aggregation, persona
//! distillation, scene calibration and answer generation.
//!
//! [`ChatBackend`] is the operator-level contract. [`MockBackend`] implements it
//! deterministically for offline runs; [`PromptedBackend`] renders the prompt
//! templates, sends them through any [`Completion`] client (e.g. [`HttpChat`])
//! and parses the strict JSON replies, re-prompting on malformed output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::http::{env_nonempty, HttpError, JsonClient, ENV_API_KEY};
use crate::model::{FactUnit, PersonaDimension, PersonaProfile, SceneUnit};
use crate::prompts;
use crate::text::{alpha_tokens, tokenize, truncate_chars};

pub const ENV_CHAT_URL: &str = "BIMEM_CHAT_URL";
pub const ENV_CHAT_MODEL: &str = "BIMEM_CHAT_MODEL";
pub const UNKNOWN_PERSONA: &str = "unknown";

/// One conversational exchange fed to fact extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub speaker: String,
    pub query: String,
    pub response: String,
}

impl Interaction {
    pub fn render(&self) -> String {
        let query = if self.speaker.is_empty() {
            self.query.clone()
        } else {
            format!("{}: {}", self.speaker, self.query)
        };
        format!("{query}\nResponse: {}", self.response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactDraft {
    pub keywords: Vec<String>,
    pub context: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDraft {
    pub scene_memory: String,
    pub keywords: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationVerdict {
    pub needs_calibration: bool,
    pub added_condition: String,
    pub reason: String,
}

impl CalibrationVerdict {
    pub fn consistent(reason: impl Into<String>) -> Self {
        Self {
            needs_calibration: false,
            added_condition: String::new(),
            reason: reason.into(),
        }
    }

    /// Enforces `needs_calibration => non-empty condition` and
    /// `!needs_calibration => empty condition`. Returns whether a
    /// calibration request had to be dropped.
    pub fn sanitize(mut self) -> (Self, bool) {
        let dropped = self.needs_calibration && self.added_condition.trim().is_empty();
        if dropped || !self.needs_calibration {
            self.needs_calibration = false;
            self.added_condition.clear();
        } else {
            self.added_condition = self.added_condition.trim().to_string();
        }
        (self, dropped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorSchema {
    Fact,
    Scene,
    /// Persona reply that must contain at least the given dimension.
    Persona(PersonaDimension),
    Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedRecord {
    Fact(FactDraft),
    Scene(SceneDraft),
    Persona(BTreeMap<PersonaDimension, String>),
    Calibration(CalibrationVerdict),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("invalid JSON at byte offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("expected a JSON object")]
    NotAnObject,
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("field `{field}` must be {expected}")]
    WrongType { field: String, expected: &'static str },
    #[error("field `{0}` must not be empty")]
    EmptyField(String),
}

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("invalid operator input: {0}")]
    Input(String),
    #[error("backend transport failed (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("backend reply unusable after {attempts} attempts: {source}")]
    Parse {
        attempts: usize,
        #[source]
        source: ParseError,
    },
    #[error("{0} is not set")]
    MissingEnv(&'static str),
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // drop the info string (e.g. `json`) on the opening fence line
    let body = match rest.find('\n') {
        Some(i) => &rest[i + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn req_string(obj: &Map<String, Value>, field: &str) -> Result<String, ParseError> {
    match obj.get(field) {
        None => Err(ParseError::MissingField(field.into())),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ParseError::WrongType {
            field: field.into(),
            expected: "a string",
        }),
    }
}

fn req_string_list(obj: &Map<String, Value>, field: &str) -> Result<Vec<String>, ParseError> {
    let wrong = || ParseError::WrongType {
        field: field.into(),
        expected: "an array of strings",
    };
    match obj.get(field) {
        None => Err(ParseError::MissingField(field.into())),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(wrong))
            .collect(),
        Some(_) => Err(wrong()),
    }
}

/// Parses an operator reply against its schema.
///
/// Surrounding markdown code fences are stripped and unknown fields ignored.
/// Calibration replies may spell the condition key `added condition` or
/// `added_condition`.
pub fn parse_operator_json(raw: &str, schema: OperatorSchema) -> Result<ParsedRecord, ParseError> {
    let body = strip_fences(raw);
    let value: Value = serde_json::from_str(body).map_err(|e| ParseError::Syntax {
        offset: byte_offset(body, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(ParseError::NotAnObject);
    };
    match schema {
        OperatorSchema::Fact => {
            let keywords = req_string_list(&obj, "keywords")?;
            let context = req_string(&obj, "context")?;
            let tags = req_string_list(&obj, "tags")?;
            if context.trim().is_empty() {
                return Err(ParseError::EmptyField("context".into()));
            }
            Ok(ParsedRecord::Fact(FactDraft {
                keywords,
                context: context.trim().to_string(),
                tags,
            }))
        }
        OperatorSchema::Scene => Ok(ParsedRecord::Scene(SceneDraft {
            scene_memory: req_string(&obj, "scene_memory")?.trim().to_string(),
            keywords: req_string_list(&obj, "keywords")?,
            tags: req_string_list(&obj, "tags")?,
        })),
        OperatorSchema::Persona(required) => {
            let text = req_string(&obj, required.key())?;
            if text.trim().is_empty() {
                return Err(ParseError::EmptyField(required.key().into()));
            }
            let mut dims = BTreeMap::new();
            for d in PersonaDimension::ALL {
                if let Some(Value::String(s)) = obj.get(d.key()) {
                    if !s.trim().is_empty() {
                        dims.insert(d, s.trim().to_string());
                    }
                }
            }
            Ok(ParsedRecord::Persona(dims))
        }
        OperatorSchema::Calibration => {
            let needs_calibration = match obj.get("needs_calibration") {
                None => return Err(ParseError::MissingField("needs_calibration".into())),
                Some(Value::Bool(b)) => *b,
                Some(_) => {
                    return Err(ParseError::WrongType {
                        field: "needs_calibration".into(),
                        expected: "a boolean",
                    })
                }
            };
            let key = ["added condition", "added_condition"]
                .into_iter()
                .find(|k| obj.contains_key(*k));
            let added_condition = match key {
                Some(k) => req_string(&obj, k)?,
                None if needs_calibration => return Err(ParseError::MissingField("added condition".into())),
                None => String::new(),
            };
            let reason = match obj.get("reason") {
                Some(Value::String(s)) => s.clone(),
                _ => String::new(),
            };
            Ok(ParsedRecord::Calibration(CalibrationVerdict {
                needs_calibration,
                added_condition,
                reason,
            }))
        }
    }
}

/// Operator-level backend contract. Implementations must be shareable across threads.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> String;
    fn extract_fact(&self, interaction: &Interaction) -> Result<FactDraft, OperatorError>;
    fn aggregate_scene(&self, facts: &[&FactUnit]) -> Result<SceneDraft, OperatorError>;
    fn distill_persona_dimension(&self, scenes: &[&SceneUnit], dim: PersonaDimension) -> Result<String, OperatorError>;
    fn calibrate_scene(&self, scene: &SceneUnit, persona: &PersonaProfile) -> Result<CalibrationVerdict, OperatorError>;
    fn generate_answer(&self, query: &str, context: &str) -> Result<String, OperatorError>;
}

pub fn extract_fact(backend: &dyn ChatBackend, interaction: &Interaction) -> Result<FactDraft, OperatorError> {
    if interaction.query.trim().is_empty() && interaction.response.trim().is_empty() {
        return Err(OperatorError::Input("interaction has neither query nor response".into()));
    }
    backend.extract_fact(interaction)
}

pub fn aggregate_scene(backend: &dyn ChatBackend, facts: &[&FactUnit]) -> Result<SceneDraft, OperatorError> {
    if facts.is_empty() {
        return Err(OperatorError::Input("cannot aggregate an empty fact cluster".into()));
    }
    backend.aggregate_scene(facts)
}

pub fn distill_persona_dimension(
    backend: &dyn ChatBackend,
    scenes: &[&SceneUnit],
    dim: PersonaDimension,
) -> Result<String, OperatorError> {
    if scenes.is_empty() {
        return Err(OperatorError::Input("cannot distill a persona from zero scenes".into()));
    }
    let text = backend.distill_persona_dimension(scenes, dim)?;
    if text.trim().is_empty() {
        return Ok(UNKNOWN_PERSONA.to_string());
    }
    Ok(text)
}

/// Runs calibration and coerces an invalid verdict (calibrate with no condition) to a no-op.
pub fn calibrate_scene(
    backend: &dyn ChatBackend,
    scene: &SceneUnit,
    persona: &PersonaProfile,
) -> Result<CalibrationVerdict, OperatorError> {
    let (verdict, dropped) = backend.calibrate_scene(scene, persona)?.sanitize();
    if dropped {
        warn!("scene {}: calibration requested with an empty condition; ignored", scene.id);
    }
    Ok(verdict)
}

pub fn generate_answer(backend: &dyn ChatBackend, query: &str, context: &str) -> Result<String, OperatorError> {
    if query.trim().is_empty() {
        return Err(OperatorError::Input("query is empty".into()));
    }
    backend.generate_answer(query, context)
}

fn top_by_frequency<'a>(tokens: impl IntoIterator<Item = &'a str>, limit: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(limit).map(|(t, _)| t.to_string()).collect()
}

fn lexicon(dim: PersonaDimension) -> &'static [&'static str] {
    match dim {
        PersonaDimension::BasicInfo => &[
            "name",
            "years",
            "age",
            "birthday",
            "born",
            "live",
            "lives",
            "living",
            "moved",
            "city",
            "hometown",
            "work",
            "works",
            "working",
            "job",
            "career",
            "occupation",
            "student",
            "school",
            "college",
            "teacher",
            "nurse",
            "engineer",
            "doctor",
            "counselor",
            "shelter",
            "office",
            "company",
        ],
        PersonaDimension::Interests => &[
            "hiking",
            "photography",
            "painting",
            "music",
            "guitar",
            "piano",
            "reading",
            "books",
            "cooking",
            "baking",
            "camping",
            "running",
            "travel",
            "traveling",
            "swimming",
            "yoga",
            "gaming",
            "games",
            "dancing",
            "gardening",
            "pottery",
            "movies",
            "sports",
            "soccer",
            "football",
            "basketball",
            "chess",
            "art",
            "writing",
            "cycling",
            "fishing",
            "climbing",
            "mountains",
            "nature",
            "concerts",
            "singing",
            "knitting",
            "spicy",
            "food",
            "beach",
        ],
        PersonaDimension::Personality => &[
            "kind",
            "shy",
            "outgoing",
            "anxious",
            "calm",
            "curious",
            "brave",
            "courage",
            "empathy",
            "empathetic",
            "patient",
            "creative",
            "confident",
            "introverted",
            "extroverted",
            "cheerful",
            "stubborn",
            "optimistic",
            "resilient",
            "caring",
            "passionate",
            "nervous",
        ],
        PersonaDimension::Values => &[
            "honesty",
            "faith",
            "freedom",
            "equality",
            "community",
            "kindness",
            "justice",
            "growth",
            "authenticity",
            "acceptance",
            "education",
            "health",
            "environment",
            "religion",
            "belief",
            "beliefs",
            "helping",
            "support",
            "volunteering",
            "charity",
            "family",
        ],
        PersonaDimension::Relationships => &[
            "friend",
            "friends",
            "mother",
            "father",
            "mom",
            "dad",
            "sister",
            "brother",
            "husband",
            "wife",
            "partner",
            "kids",
            "children",
            "daughter",
            "son",
            "colleague",
            "colleagues",
            "boyfriend",
            "girlfriend",
            "neighbor",
            "mentor",
            "family",
            "grandma",
            "grandpa",
        ],
    }
}

/// Splits assembled context into candidate answer sentences, dropping line labels.
fn context_sentences(context: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in context.lines() {
        let line = line.trim();
        let body = if line.starts_with("FACT ") || line.starts_with("SCENE ") || line.starts_with("PERSONA/") {
            line.split_once(": ").map_or(line, |(_, rest)| rest)
        } else {
            line
        };
        let mut start = 0;
        let bytes = body.as_bytes();
        for (i, c) in body.char_indices() {
            let boundary = matches!(c, '.' | '!' | '?' | ';') && bytes.get(i + 1).is_none_or(|b| b.is_ascii_whitespace());
            if boundary {
                out.push(&body[start..=i]);
                start = i + 1;
            }
        }
        out.push(&body[start..]);
    }
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Deterministic stand-in for an LLM. Identical inputs give identical outputs.
#[derive(Debug, Clone, Default)]
pub struct MockBackend;

impl ChatBackend for MockBackend {
    fn name(&self) -> String {
        "mock".into()
    }

    fn extract_fact(&self, interaction: &Interaction) -> Result<FactDraft, OperatorError> {
        let source = if interaction.query.trim().is_empty() {
            interaction.response.trim()
        } else {
            interaction.query.trim()
        };
        let context = truncate_chars(source, 200).trim_end().to_string();
        let tokens = alpha_tokens(&context);
        let keywords = top_by_frequency(tokens.iter().map(String::as_str).filter(|t| t.chars().count() > 3), 5);
        Ok(FactDraft {
            keywords,
            context,
            tags: Vec::new(),
        })
    }

    fn aggregate_scene(&self, facts: &[&FactUnit]) -> Result<SceneDraft, OperatorError> {
        let joined = facts.iter().map(|f| f.content.as_str()).collect::<Vec<_>>().join("; ");
        let scene_memory = truncate_chars(&joined, 500).to_string();
        let keywords = top_by_frequency(facts.iter().flat_map(|f| f.keywords.iter().map(String::as_str)), 8);
        let tags: BTreeSet<String> = facts.iter().flat_map(|f| f.tags.iter().cloned()).collect();
        Ok(SceneDraft {
            scene_memory,
            keywords,
            tags: tags.into_iter().collect(),
        })
    }

    fn distill_persona_dimension(&self, scenes: &[&SceneUnit], dim: PersonaDimension) -> Result<String, OperatorError> {
        let words = lexicon(dim);
        let mut seen = BTreeSet::new();
        let mut matched = Vec::new();
        for kw in scenes.iter().flat_map(|s| s.keywords.iter()) {
            let kw = kw.to_lowercase();
            if words.contains(&kw.as_str()) && seen.insert(kw.clone()) {
                matched.push(kw);
            }
        }
        if matched.is_empty() {
            Ok(UNKNOWN_PERSONA.to_string())
        } else {
            Ok(matched.join(", "))
        }
    }

    fn calibrate_scene(&self, _scene: &SceneUnit, _persona: &PersonaProfile) -> Result<CalibrationVerdict, OperatorError> {
        Ok(CalibrationVerdict::consistent("mock"))
    }

    /// Picks the context sentence sharing the most distinct tokens with the query.
    fn generate_answer(&self, query: &str, context: &str) -> Result<String, OperatorError> {
        let q: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut best: Option<(usize, &str)> = None;
        for sentence in context_sentences(context) {
            let s: BTreeSet<String> = tokenize(sentence).into_iter().collect();
            let overlap = q.intersection(&s).count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, sentence));
            }
        }
        Ok(best.map(|(_, s)| s.to_string()).unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Error)]
#[error("completion failed (status {status:?}): {message}")]
pub struct CompletionError {
    pub status: Option<u16>,
    pub message: String,
    pub retryable: bool,
}

/// Raw chat-completion client.
pub trait Completion: Send + Sync {
    fn name(&self) -> String;
    fn complete(&self, messages: &[Message]) -> Result<String, CompletionError>;
}

/// Implements the operators by prompting a [`Completion`] client and parsing its JSON replies.
#[derive(Debug)]
pub struct PromptedBackend<C> {
    client: C,
    max_retries: usize,
}

impl<C: Completion> PromptedBackend<C> {
    pub fn new(client: C) -> Self {
        Self { client, max_retries: 2 }
    }

    pub fn with_max_retries(mut self, max_retries: usize) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn client(&self) -> &C {
        &self.client
    }

    fn ask(&self, prompt: &str, schema: OperatorSchema) -> Result<ParsedRecord, OperatorError> {
        let attempts = self.max_retries + 1;
        let mut last_parse = None;
        let mut last_transport = None;
        for attempt in 0..attempts {
            let content = if last_parse.is_some() {
                format!("{prompt}\n\n{}", prompts::JSON_REMINDER)
            } else {
                prompt.to_string()
            };
            match self.client.complete(&[Message::user(content)]) {
                Ok(reply) => match parse_operator_json(&reply, schema) {
                    Ok(rec) => return Ok(rec),
                    Err(e) => {
                        warn!("attempt {}/{attempts}: unusable reply: {e}", attempt + 1);
                        last_parse = Some(e);
                    }
                },
                Err(e) if e.retryable => {
                    warn!("attempt {}/{attempts}: {e}", attempt + 1);
                    last_transport = Some(e);
                }
                Err(e) => {
                    return Err(OperatorError::Transport {
                        status: e.status,
                        message: e.message,
                    })
                }
            }
        }
        match (last_parse, last_transport) {
            (Some(source), _) => Err(OperatorError::Parse { attempts, source }),
            (None, Some(e)) => Err(OperatorError::Transport {
                status: e.status,
                message: e.message,
            }),
            (None, None) => unreachable!("at least one attempt is made"),
        }
    }
}

impl<C: Completion> ChatBackend for PromptedBackend<C> {
    fn name(&self) -> String {
        self.client.name()
    }

    fn extract_fact(&self, interaction: &Interaction) -> Result<FactDraft, OperatorError> {
        match self.ask(&prompts::fact_extraction(interaction), OperatorSchema::Fact)? {
            ParsedRecord::Fact(f) => Ok(f),
            _ => unreachable!("schema mismatch"),
        }
    }

    fn aggregate_scene(&self, facts: &[&FactUnit]) -> Result<SceneDraft, OperatorError> {
        match self.ask(&prompts::scene_aggregation(facts), OperatorSchema::Scene)? {
            ParsedRecord::Scene(s) => Ok(s),
            _ => unreachable!("schema mismatch"),
        }
    }

    fn distill_persona_dimension(&self, scenes: &[&SceneUnit], dim: PersonaDimension) -> Result<String, OperatorError> {
        match self.ask(&prompts::persona_distillation(scenes, dim), OperatorSchema::Persona(dim))? {
            ParsedRecord::Persona(mut dims) => Ok(dims.remove(&dim).unwrap_or_default()),
            _ => unreachable!("schema mismatch"),
        }
    }

    fn calibrate_scene(&self, scene: &SceneUnit, persona: &PersonaProfile) -> Result<CalibrationVerdict, OperatorError> {
        match self.ask(&prompts::scene_calibration(scene, persona), OperatorSchema::Calibration)? {
            ParsedRecord::Calibration(v) => Ok(v),
            _ => unreachable!("schema mismatch"),
        }
    }

    fn generate_answer(&self, query: &str, context: &str) -> Result<String, OperatorError> {
        let prompt = prompts::answer_generation(query, context);
        let mut last = None;
        for _ in 0..=self.max_retries {
            match self.client.complete(&[Message::user(prompt.clone())]) {
                Ok(answer) => return Ok(answer),
                Err(e) if e.retryable => last = Some(e),
                Err(e) => {
                    last = Some(e);
                    break;
                }
            }
        }
        let e = last.expect("at least one attempt is made");
        Err(OperatorError::Transport {
            status: e.status,
            message: e.message,
        })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: Message,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

/// Chat-completions client posting `{model, messages, temperature}`.
#[derive(Debug)]
pub struct HttpChat {
    url: String,
    model: String,
    temperature: f64,
    client: JsonClient,
}

impl HttpChat {
    pub fn new(url: String, model: String, api_key: Option<String>, max_in_flight: usize) -> Self {
        Self {
            url,
            model,
            temperature: 0.0,
            client: JsonClient::new(api_key, max_in_flight, Duration::from_secs(180)),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature.max(0.0);
        self
    }

    pub fn from_env(max_in_flight: usize) -> Result<Self, OperatorError> {
        let url = env_nonempty(ENV_CHAT_URL).ok_or(OperatorError::MissingEnv(ENV_CHAT_URL))?;
        let model = env_nonempty(ENV_CHAT_MODEL).ok_or(OperatorError::MissingEnv(ENV_CHAT_MODEL))?;
        Ok(Self::new(url, model, env_nonempty(ENV_API_KEY), max_in_flight))
    }
}

impl Completion for HttpChat {
    fn name(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn complete(&self, messages: &[Message]) -> Result<String, CompletionError> {
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: self.temperature,
        };
        let resp: ChatResponse = self.client.post(&self.url, &body).map_err(|e: HttpError| CompletionError {
            status: e.status(),
            retryable: e.is_retryable() || matches!(e, HttpError::Body { .. }),
            message: e.to_string(),
        })?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| CompletionError {
                status: None,
                message: "response has no choices".into(),
                retryable: true,
            })
    }
}

pub type RemoteBackend = PromptedBackend<HttpChat>;
