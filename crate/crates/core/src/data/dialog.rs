//! Dialog records.
//!
//! One JSON object per line:
//!
//! ```json
//! {"image_id": "img0", "caption": "...",
//!  "rounds": [{"question": "...", "answer": "...", "candidates": ["...", ...], "gt_index": 3}]}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::FeatureStore;
use super::text::{preprocess, TextKind};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const MAX_ROUNDS: usize = 10;
pub const MAX_CANDIDATES: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRound {
    pub question: String,
    pub answer: String,
    pub candidates: Vec<String>,
    pub gt_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDialog {
    pub image_id: String,
    pub caption: String,
    pub rounds: Vec<RawRound>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub image_id: String,
    pub caption: Vec<usize>,
    pub rounds: Vec<Round>,
}

impl Dialog {
    /// History visible at `round`: the caption, then `q_i ‖ a_i` for every
    /// earlier round. The question's END token separates q from a.
    pub fn history(&self, round: usize) -> Vec<Vec<usize>> {
        let mut h = vec![self.caption.clone()];
        for r in &self.rounds[..round] {
            let mut qa = r.question.clone();
            qa.extend_from_slice(&r.answer);
            h.push(qa);
        }
        h
    }
}

/// Reference to one training/evaluation example: (dialog, round).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example {
    pub dialog: usize,
    pub round: usize,
}

pub fn examples(dialogs: &[Dialog]) -> Vec<Example> {
    dialogs.iter().enumerate().flat_map(|(d, dl)| (0..dl.rounds.len()).map(move |r| Example { dialog: d, round: r })).collect()
}

fn invalid(record: usize, message: impl Into<String>) -> Error {
    Error::Parse { location: format!("record {record}"), message: message.into() }
}

impl RawDialog {
    /// Tokenizes and validates. `record` is used in error locations.
    pub fn to_dialog(&self, record: usize, vocab: &Vocabulary, features: &FeatureStore) -> Result<Dialog> {
        if !features.contains(&self.image_id) {
            return Err(Error::Reference(format!("record {record}: image id {:?} has no features", self.image_id)));
        }
        if self.rounds.is_empty() || self.rounds.len() > MAX_ROUNDS {
            return Err(invalid(record, format!("{} rounds, expected 1..={MAX_ROUNDS}", self.rounds.len())));
        }
        let n = self.rounds[0].candidates.len();
        let mut rounds = Vec::with_capacity(self.rounds.len());
        for (ri, r) in self.rounds.iter().enumerate() {
            let c = r.candidates.len();
            if c == 0 || c > MAX_CANDIDATES || c != n {
                return Err(invalid(record, format!("round {ri}: {c} candidates")));
            }
            if r.gt_index >= c {
                return Err(invalid(record, format!("round {ri}: gt index {} out of range", r.gt_index)));
            }
            let answer = preprocess(&r.answer, TextKind::Answer, vocab);
            let candidates: Vec<Vec<usize>> = r.candidates.iter().map(|t| preprocess(t, TextKind::Answer, vocab)).collect();
            if candidates[r.gt_index] != answer {
                return Err(invalid(record, format!("round {ri}: gt candidate differs from answer")));
            }
            rounds.push(Round { question: preprocess(&r.question, TextKind::Question, vocab), answer, candidates, gt_index: r.gt_index });
        }
        Ok(Dialog { image_id: self.image_id.clone(), caption: preprocess(&self.caption, TextKind::Caption, vocab), rounds })
    }
}

pub fn read_raw_dialogs(path: &Path) -> Result<Vec<RawDialog>> {
    let file = fs::File::open(path).map_err(|e| Error::Reference(format!("dialog file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: RawDialog = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { location: format!("{}:{}", path.display(), i + 1), message: e.to_string() })?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_raw_dialogs(path: &Path, dialogs: &[RawDialog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for d in dialogs {
        serde_json::to_writer(&mut f, d).expect("dialog serializes");
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn tokenize_dialogs(raw: &[RawDialog], vocab: &Vocabulary, features: &FeatureStore) -> Result<Vec<Dialog>> {
    raw.iter().enumerate().map(|(i, d)| d.to_dialog(i, vocab, features)).collect()
}

pub fn load_dataset(dialog_path: &Path, feature_path: &Path, vocab: &Vocabulary) -> Result<(Vec<Dialog>, FeatureStore)> {
    let features = FeatureStore::read(feature_path)?;
    let raw = read_raw_dialogs(dialog_path)?;
    let dialogs = tokenize_dialogs(&raw, vocab, &features)?;
    Ok((dialogs, features))
}

/// All caption, question and answer texts, for vocabulary building.
pub fn corpus_texts(raw: &[RawDialog]) -> Vec<&str> {
    let mut out = Vec::new();
    for d in raw {
        out.push(d.caption.as_str());
        for r in &d.rounds {
            out.push(r.question.as_str());
            out.push(r.answer.as_str());
        }
    }
    out
}
