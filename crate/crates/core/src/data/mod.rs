//! Vocabulary, preprocessing, dialog and feature files, synthetic data.

mod dialog;
mod features;
mod synth;
mod text;
mod vocab;

pub use dialog::{
    corpus_texts, examples, load_dataset, read_raw_dialogs, tokenize_dialogs, write_raw_dialogs, Dialog, Example, RawDialog, RawRound,
    Round, MAX_CANDIDATES, MAX_ROUNDS,
};
pub use features::FeatureStore;
pub use synth::{split_dialogs, synth_generate, SynthConfig, SynthData, SynthWorld};
pub use text::{preprocess, tokenize, truncate, TextKind};
pub use vocab::{Vocabulary, END, PAD, START, UNK};
