//! Versioned JSON persistence for memory banks.

use std::io::Write;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::model::{validate_bank, MemoryBank, Violation};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported format_version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("invalid bank:\n{}", list(.0))]
    Invalid(Vec<Violation>),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  - {x}")).collect::<Vec<_>>().join("\n")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Canonical serialization: sorted keys, shortest round-trip floats, two-space indent, trailing newline.
pub fn to_canonical_json(bank: &MemoryBank) -> Result<String, StoreError> {
    let violations = validate_bank(bank);
    if !violations.is_empty() {
        return Err(StoreError::Invalid(violations));
    }
    let mut value = serde_json::to_value(bank).map_err(|e| StoreError::Parse {
        path: ".".into(),
        message: e.to_string(),
    })?;
    if let Value::Object(map) = &mut value {
        map.insert("format_version".into(), FORMAT_VERSION.into());
    }
    // serde_json's Map is a BTreeMap without `preserve_order`, so keys come out sorted
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    Ok(text)
}

pub fn from_json(text: &str) -> Result<MemoryBank, StoreError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| StoreError::Parse {
        path: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let obj = value.as_object_mut().ok_or_else(|| StoreError::Parse {
        path: ".".into(),
        message: "expected a JSON object".into(),
    })?;
    let version = obj.remove("format_version").ok_or_else(|| StoreError::Parse {
        path: "format_version".into(),
        message: "missing field".into(),
    })?;
    let found = version.as_u64().ok_or_else(|| StoreError::Parse {
        path: "format_version".into(),
        message: format!("expected an unsigned integer, got {version}"),
    })?;
    if found != FORMAT_VERSION {
        return Err(StoreError::Version { found });
    }
    let bank: MemoryBank = serde_path_to_error::deserialize(value).map_err(|e| StoreError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let violations = validate_bank(&bank);
    if !violations.is_empty() {
        return Err(StoreError::Invalid(violations));
    }
    Ok(bank)
}

/// Validates, then writes through a temp file in the target directory and renames it into place.
pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<(), StoreError> {
    let text = to_canonical_json(bank)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(path))?;
    tmp.write_all(text.as_bytes()).map_err(io(path))?;
    tmp.as_file().sync_all().map_err(io(path))?;
    tmp.persist(path).map_err(|e| io(path)(e.error))?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<MemoryBank, StoreError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::{construct_memory, Conversation, Turn};
    use crate::embedding::HashEmbedder;
    use crate::model::Rule;
    use crate::operators::MockBackend;

    fn bank() -> MemoryBank {
        let conv = Conversation {
            id: "c".into(),
            turns: (0..6)
                .map(|i| Turn {
                    turn: i,
                    speaker: "Ana".into(),
                    query: format!("Ana talks about painting session {}", i % 2),
                    response: "nice".into(),
                    timestamp: format!("2023-05-0{}", i + 1),
                })
                .collect(),
        };
        construct_memory(&conv, &Default::default(), &HashEmbedder::new(64), &MockBackend)
            .unwrap()
            .bank
    }

    #[test]
    fn save_load_round_trip_and_byte_stability() {
        let dir = tempfile::tempdir().unwrap();
        let b = bank();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_bank(&b, &p1).unwrap();
        save_bank(&b, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(load_bank(&p1).unwrap(), b);
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.contains("\"format_version\": 1"));
    }

    #[test]
    fn invalid_bank_refused_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bank();
        let first = *b.scenes.keys().next().unwrap();
        let extra = *b.facts.keys().last().unwrap() + 100;
        b.scenes.get_mut(&first).unwrap().members.insert(extra);
        let p = dir.path().join("bad.json");
        match save_bank(&b, &p) {
            Err(StoreError::Invalid(v)) => assert!(v
                .iter()
                .any(|x| x.rule == Rule::DanglingReference || x.rule == Rule::Partition)),
            other => panic!("{other:?}"),
        }
        assert!(!p.exists());
    }

    #[test]
    fn truncated_and_future_versions_rejected() {
        let text = to_canonical_json(&bank()).unwrap();
        assert!(matches!(from_json(&text[..text.len() / 2]), Err(StoreError::Parse { .. })));
        let future = text.replace("\"format_version\": 1", "\"format_version\": 999");
        assert!(matches!(from_json(&future), Err(StoreError::Version { found: 999 })));
    }

    #[test]
    fn type_errors_carry_json_path() {
        let text = to_canonical_json(&bank()).unwrap();
        let bad = text.replacen("\"timestamp\": \"2023-05-01\"", "\"timestamp\": 5", 1);
        let err = from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("facts.0.timestamp"), "{err}");
    }
}
