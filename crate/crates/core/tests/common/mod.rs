#![allow(dead_code)]

use bimem::construction::{construct_memory, ConstructionConfig, Conversation, Turn};
use bimem::embedding::HashEmbedder;
use bimem::eval::QaItem;
use bimem::model::{MemoryBank, QuestionCategory};
use bimem::operators::MockBackend;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: &[&str] = &[
    "garden",
    "tomato",
    "river",
    "kayak",
    "violin",
    "concert",
    "recipe",
    "pasta",
    "hiking",
    "trail",
    "puppy",
    "vet",
    "painting",
    "canvas",
    "marathon",
    "sneakers",
    "library",
    "novel",
    "chess",
    "tournament",
    "pottery",
    "kiln",
    "camping",
    "tent",
    "guitar",
    "lesson",
    "sister",
    "wedding",
    "bakery",
    "bread",
    "museum",
    "sculpture",
    "ocean",
    "surfing",
    "coffee",
    "espresso",
    "project",
    "deadline",
    "yoga",
    "studio",
];

pub fn turn(i: u64, text: String) -> Turn {
    Turn {
        turn: i,
        speaker: if i.is_multiple_of(2) { "Ana".into() } else { "Ben".into() },
        query: text,
        response: String::new(),
        timestamp: format!("2024-{:02}-{:02}T09:00:00", 1 + (i / 28) % 12, 1 + i % 28),
    }
}

/// Turns drawn from a small topical vocabulary so that some pairs share tokens.
pub fn random_conversation(rng: &mut ChaCha8Rng, id: &str, max_turns: usize) -> Conversation {
    let n = rng.random_range(1..=max_turns) as u64;
    let turns = (1..=n)
        .map(|i| {
            let len = rng.random_range(2..=6);
            let words: Vec<&str> = (0..len).map(|_| *VOCAB.choose(rng).unwrap()).collect();
            turn(i, words.join(" "))
        })
        .collect();
    Conversation { id: id.into(), turns }
}

/// A valid bank built through the real pipeline, with random deltas added to some scenes.
pub fn random_bank(rng: &mut ChaCha8Rng, max_turns: usize) -> MemoryBank {
    let conv = random_conversation(rng, "random", max_turns);
    let cfg = ConstructionConfig {
        tau: rng.random_range(0.05..0.6),
        seed: rng.random(),
        max_in_flight: 1,
        ..Default::default()
    };
    let dim = *[16usize, 32, 64].choose(rng).unwrap();
    let mut bank = construct_memory(&conv, &cfg, &HashEmbedder::new(dim), &MockBackend)
        .expect("mock construction succeeds")
        .bank;
    for scene in bank.scenes.values_mut() {
        if rng.random_bool(0.3) {
            scene.delta = Some(format!("only when {} {:.3}", VOCAB.choose(rng).unwrap(), rng.random::<f64>()));
        }
    }
    bank
}

/// Query text made of vocabulary words.
pub fn random_query(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=4);
    (0..len).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Hash dimension for the planted fixtures; wide enough that bucket collisions
/// do not add cross-topic edges.
pub const PLANTED_DIM: usize = 2048;

/// One planted-evidence conversation. The question matches an anchor fact
/// directly; a hidden fact shares cluster vocabulary with the anchor but no
/// token with the question, so only its scene can lead to it. Every text has
/// six tokens, so a single bucket collision stays below the edge threshold.
pub fn planted_conversation(n: usize) -> (Conversation, QaItem) {
    let w = |tag: &str, j: usize| format!("{tag}{n}x{j}");
    let mut texts: Vec<String> = Vec::new();
    // distractor clusters of three facts over private vocabularies
    for c in 0..8 {
        for f in 0..3 {
            let own: Vec<String> = (0..3).map(|j| w(&format!("d{c}f{f}w"), j)).collect();
            let shared: Vec<String> = (0..3).map(|j| w(&format!("d{c}s"), j)).collect();
            texts.push([shared, own].concat().join(" "));
        }
    }
    let anchor_at = texts.len();
    let query_words: Vec<String> = (0..3).map(|j| w("q", j)).collect();
    let link: Vec<String> = (0..3).map(|j| w("link", j)).collect();
    texts.push([query_words.clone(), link.clone()].concat().join(" "));
    // singletons with no shared vocabulary
    for s in 0..14 {
        texts.push((0..6).map(|j| w(&format!("solo{s}w"), j)).collect::<Vec<_>>().join(" "));
    }
    let hidden: Vec<String> = (0..3).map(|j| w("hid", j)).collect();
    texts.push([link, hidden].concat().join(" "));
    let hidden_at = texts.len() - 1;
    let turns = texts.into_iter().enumerate().map(|(i, t)| turn(i as u64 + 1, t)).collect();
    let conv = Conversation {
        id: format!("planted-{n}"),
        turns,
    };
    let qa = QaItem {
        conversation_id: conv.id.clone(),
        question: format!("what about {}", query_words.join(" ")),
        gold_answer: query_words.join(" "),
        category: QuestionCategory::MultiHop,
        evidence: vec![anchor_at as u64 + 1, hidden_at as u64 + 1],
    };
    (conv, qa)
}

pub fn planted_suite(count: usize) -> Vec<(Conversation, QaItem)> {
    (0..count).map(planted_conversation).collect()
}

/// Dataset JSON in the external conversation/QA schema.
pub fn dataset_json(items: &[(Conversation, QaItem)]) -> serde_json::Value {
    let convs: Vec<&Conversation> = items.iter().map(|(c, _)| c).collect();
    let qa: Vec<serde_json::Value> = items
        .iter()
        .map(|(_, q)| {
            serde_json::json!({
                "conversation_id": q.conversation_id,
                "question": q.question,
                "answer": q.gold_answer,
                "category": q.category.key(),
                "evidence": q.evidence,
            })
        })
        .collect();
    serde_json::json!({ "conversations": convs, "qa": qa })
}
