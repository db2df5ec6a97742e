use super::vocab::{Vocabulary, END};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextKind {
    Caption,
    Question,
    Answer,
}

impl TextKind {
    /// Word budget before the END token is appended.
    pub fn max_words(self) -> usize {
        match self {
            TextKind::Caption => 24,
            TextKind::Question => 16,
            TextKind::Answer => 8,
        }
    }
}

/// Lowercases and splits on whitespace and punctuation. Apostrophes stay
/// inside words ("can't").
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn truncate<T>(mut words: Vec<T>, kind: TextKind) -> Vec<T> {
    words.truncate(kind.max_words());
    words
}

/// Tokenize, truncate by kind, map to indices (UNK for unknown words) and
/// append END. Empty text yields `[END]`.
pub fn preprocess(text: &str, kind: TextKind, vocab: &Vocabulary) -> Vec<usize> {
    let words = truncate(tokenize(text), kind);
    let mut ids = vocab.encode(&words);
    ids.push(END);
    ids
}
