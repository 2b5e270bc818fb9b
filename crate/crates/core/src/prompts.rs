//! Prompt templates for the LLM-backed memory operators.

use crate::model::{FactUnit, PersonaDimension, PersonaProfile, SceneUnit};
use crate::operators::Interaction;

pub const JSON_REMINDER: &str =
    "Your previous reply was not valid JSON for the requested format. Return valid JSON only, with every required field and no other text.";

pub fn fact_extraction(interaction: &Interaction) -> String {
    format!(
        r#"Generate a structured fact for the following interaction content by:
1. Identifying the most salient keywords (focus on nouns, verbs, and key concepts)
2. Extracting core themes and contextual elements
3. Creating relevant categorical tags

Format the response as a JSON object:
{{
    "keywords": ["keyword1", "keyword2", ...],
    "context": "one sentence summarizing the interaction content",
    "tags": ["tag1", "tag2", ...]
}}

Interaction content:
{}"#,
        interaction.render()
    )
}

pub fn scene_aggregation(facts: &[&FactUnit]) -> String {
    let facts_content = facts
        .iter()
        .map(|f| format!("- [{}] {}", f.timestamp, f.content))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        r#"You are a scene synthesizer specialized in factual comprehension.
Task: Summarize a cluster of related factual memories into a coherent 'Scene Memory'.

Input factual memories:
{facts_content}

Instructions:
1. Identify the core theme connecting these facts.
2. Generate a descriptive summary capturing the progression of conversational facts.
3. Extract key entities and topics.

Format the response as a JSON object:
{{
    "scene_memory": "A comprehensive summarized scene",
    "keywords": ["keyword1", "keyword2", ...],
    "tags": ["tag1", "tag2", ...]
}}"#
    )
}

fn dimension_hint(dim: PersonaDimension) -> &'static str {
    match dim {
        PersonaDimension::BasicInfo => "Detailed background...",
        PersonaDimension::Interests => "Comprehensive list of hobbies and how they engage with them...",
        PersonaDimension::Personality => "In-depth personality analysis...",
        PersonaDimension::Values => "Core beliefs and motivations...",
        PersonaDimension::Relationships => "Detailed social dynamics...",
    }
}

fn dimension_scope(dim: PersonaDimension) -> &'static str {
    match dim {
        PersonaDimension::BasicInfo => "name, age, occupation, and location",
        PersonaDimension::Interests => "hobbies, likes, and dislikes",
        PersonaDimension::Personality => "personality traits and emotional patterns",
        PersonaDimension::Values => "core values, beliefs, and motivations",
        PersonaDimension::Relationships => "key social relationships",
    }
}

/// One persona dimension per call; the JSON block only asks for that dimension's key.
pub fn persona_distillation(scenes: &[&SceneUnit], dim: PersonaDimension) -> String {
    let all_scenes_content = scenes
        .iter()
        .map(|s| format!("- Scene {}: {}", s.id, s.text()))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        r#"You are a persona synthesizer specialized in psychological and behavioral analysis.
Task: Create a COMPREHENSIVE User persona based on the provided scene memories.

Input Scenes:
{all_scenes_content}

Instructions:
1. Analyze these scenes deeply. Look for patterns in behavior, emotion, and choices.
2. For the dimension below ({key}: {scope}), write a DETAILED paragraph (5-10 sentences). Do not be brief.
3. Use specific examples from the scenes to support your analysis.

Format the response as a JSON object:
{{
    "{key}": "{hint}"
}}"#,
        key = dim.key(),
        scope = dimension_scope(dim),
        hint = dimension_hint(dim),
    )
}

pub fn scene_calibration(scene: &SceneUnit, persona: &PersonaProfile) -> String {
    format!(
        r#"You are a scene memory calibrator. Your goal is to align the given scene to the user's persona.

Persona-level memory:
{user_persona}

Scene-level memory:
{current_scene}

Instructions:
1. Read the persona-level memory to understand the user's key interests, values, and traits.
2. Check the current scene-level memory. Does it fail to mention any specific connection to the user persona that is likely present in the scene?
3. If yes, add a compensatory condition to append to the original scene. This addition should explicitly align the scene to the persona (e.g., "This aligns with her interest in ...").
4. CRITICAL: DO NOT REWRITE the existing summary. ONLY generate text to ADD.
5. If the current summary is already perfect, return an empty string for "added condition".

Format the response as a JSON object:
{{
    "needs_calibration": true/false,
    "added condition": "Text to add (or empty string) as a condition",
    "reason": "The reason why you decide to calibrate."
}}"#,
        user_persona = persona.render(),
        current_scene = scene.text(),
    )
}

pub fn answer_generation(query: &str, context: &str) -> String {
    format!(
        r#"You are answering a question about a user from your long-term memory of past conversations.
Memory is organized as PERSONA (global profile), SCENE (thematic summaries) and FACT (individual interactions with timestamps).

Memory:
{context}

Question: {query}

Answer concisely in a short phrase, using only information from the memory."#
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persona_prompt_asks_for_one_key() {
        let p = persona_distillation(&[], PersonaDimension::Values);
        assert!(p.contains("\"values\": \"Core beliefs and motivations...\""));
        assert!(!p.contains("\"interests\""));
    }

    #[test]
    fn fact_prompt_embeds_interaction() {
        let i = Interaction {
            speaker: "Caroline".into(),
            query: "I went hiking".into(),
            response: "Nice".into(),
        };
        let p = fact_extraction(&i);
        assert!(p.ends_with("Caroline: I went hiking\nResponse: Nice"));
        assert!(p.contains("\"context\": \"one sentence summarizing the interaction content\""));
    }
}
