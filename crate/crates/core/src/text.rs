//! Utterance tokenization shared by the corpus, embeddings and ontology code.

/// Lowercases, splits on whitespace and strips leading/trailing punctuation.
/// Tokens that are pure punctuation are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| raw.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_ascii_control()))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}
