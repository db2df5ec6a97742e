use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::tokenize;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Token/index map. Indices 0..4 are PAD, START, END, UNK; the tokenizer
/// never produces their spellings, so they cannot collide with words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Words occurring at least `min_count` times, ordered by descending
    /// frequency then lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for w in tokenize(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_words(kept.into_iter().map(|(w, _)| w))
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, idx: usize) -> &str {
        self.tokens.get(idx).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.index_of(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Space-joined words, stopping at END and skipping PAD/START.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().take_while(|&&i| i != END).filter(|&&i| i != PAD && i != START).map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { tokens: self.words().to_vec() };
        fs::write(path, serde_json::to_string_pretty(&file).expect("vocab serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Reference(format!("vocabulary {}: {e}", path.display())))?;
        let file: VocabFile =
            serde_json::from_str(&text).map_err(|e| Error::Parse { location: path.display().to_string(), message: e.to_string() })?;
        let mut seen = std::collections::BTreeSet::new();
        for w in &file.tokens {
            if RESERVED.contains(&w.as_str()) || !seen.insert(w) {
                return Err(Error::Parse { location: path.display().to_string(), message: format!("duplicate or reserved token {w:?}") });
            }
        }
        Ok(Vocabulary::from_words(file.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn min_count_filters_rare_words() {
        let v = Vocabulary::build(["a a a a a b"], 5);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.index_of("b"), UNK);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = Vocabulary::build(["the cat sat", "on the mat"], 1);
        assert_eq!(v.words().len(), 5);
        assert_eq!(v.words()[0], "the");
    }

    #[test]
    fn ties_are_lexicographic_and_stable() {
        let corpus = ["zeta beta alpha", "gamma zeta beta alpha gamma"];
        let a = Vocabulary::build(corpus, 1);
        let b = Vocabulary::build(corpus, 1);
        assert_eq!(a, b);
        assert_eq!(a.words(), &["alpha", "beta", "gamma", "zeta"]);
    }

    #[test]
    fn reserved_indices() {
        let v = Vocabulary::build(["x"], 1);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(START), "<start>");
        assert_eq!(v.token(END), "<end>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.index_of("<unk>"), UNK);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let v = Vocabulary::build(["red blue red green"], 1);
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_encode_identity(words in proptest::collection::vec("[a-z]{1,5}", 1..30)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()], 1);
            let ids = v.encode(&words);
            prop_assert_eq!(v.decode(&ids), words);
        }
    }
}
