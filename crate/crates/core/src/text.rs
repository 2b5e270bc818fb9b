//! Tokenization shared by the hashing embedder, the lexical index and the mock operators.

/// Lowercases and splits on every non-alphanumeric character, dropping empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Alphabetic-only tokens, lowercased.
pub fn alpha_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Truncates to at most `max` characters without splitting a code point.
pub fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

/// Rough token count used for context budgets.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits() {
        assert_eq!(tokenize("Hello, World!  x2"), vec!["hello", "world", "x2"]);
        assert!(tokenize("  ...  ").is_empty());
        assert_eq!(tokenize("basic_info: NYC"), vec!["basic", "info", "nyc"]);
    }

    #[test]
    fn alpha_tokens_drop_digits() {
        assert_eq!(alpha_tokens("abc123def 4"), vec!["abc", "def"]);
    }

    #[test]
    fn truncate_respects_char_boundaries() {
        assert_eq!(truncate_chars("héllo", 2), "hé");
        assert_eq!(truncate_chars("hi", 10), "hi");
    }
}
