//! Title normalization and tokenization shared by matching and BM25.

/// Canonical form used for title matching: lowercase, with whitespace and
/// every non-alphanumeric character removed. Non-ASCII letters and digits
/// are kept.
pub fn normalize_title(s: &str) -> String {
    s.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric())
        .collect()
}

/// Lowercased alphanumeric runs.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}
