//! Flat run configuration, read from TOML with `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::TiePolicy;
use crate::generator::GumbelConfig;
use crate::nn::AdamConfig;

/// Phase-3 regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// G trains on the frozen discriminator's perceptual loss.
    #[default]
    Transfer,
    /// D additionally trains on `-L_G`.
    Gan1,
    /// D additionally trains on the n-pair loss with the sample as an extra negative.
    Gan2,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Transfer => "transfer",
            Mode::Gan1 => "gan1",
            Mode::Gan2 => "gan2",
        }
    }
}

/// Length treatment of generator log-likelihood scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNorm {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    /// LSTM hidden size, shared by every LSTM and attention layer.
    pub d: usize,
    /// Word-embedding width.
    pub emb: usize,

    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub g_epochs: usize,
    pub d_epochs: usize,
    pub phase3_epochs: usize,

    pub mode: Mode,
    /// Weight of the MLE term next to the perceptual loss.
    pub alpha: f64,
    pub tau: f64,
    /// L2 weight on answer embeddings in the n-pair loss.
    pub lambda: f64,
    pub npair_negatives: usize,
    pub max_answer_len: usize,
    pub score_norm: ScoreNorm,
    pub tie_policy: TiePolicy,

    pub train_dialogs: String,
    pub val_dialogs: String,
    pub features: String,
    pub vocab: String,
    pub min_count: usize,

    pub synth_dialogs: usize,
    pub synth_vocab: usize,
    pub synth_regions: usize,
    pub synth_candidates: usize,
    pub synth_rounds: usize,
    pub synth_d_img: usize,
    pub synth_noise: f64,
    pub val_fraction: f64,

    /// Answers drawn per question by `generate`.
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            d: 512,
            emb: 300,
            lr: 4e-4,
            batch_size: 32,
            grad_clip: 0.0,
            g_epochs: 20,
            d_epochs: 30,
            phase3_epochs: 10,
            mode: Mode::Transfer,
            alpha: 0.5,
            tau: 0.5,
            lambda: 0.002,
            npair_negatives: 99,
            max_answer_len: 8,
            score_norm: ScoreNorm::Mean,
            tie_policy: TiePolicy::Optimistic,
            train_dialogs: "data/train.jsonl".into(),
            val_dialogs: "data/val.jsonl".into(),
            features: "data/features.bin".into(),
            vocab: "data/vocab.json".into(),
            min_count: 5,
            synth_dialogs: 200,
            synth_vocab: 50,
            synth_regions: 4,
            synth_candidates: 20,
            synth_rounds: 10,
            synth_d_img: 16,
            synth_noise: 0.05,
            val_fraction: 0.2,
            samples: 3,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values parse as TOML scalars, falling
    /// back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("emb", self.emb),
            ("batch_size", self.batch_size),
            ("npair_negatives", self.npair_negatives),
            ("max_answer_len", self.max_answer_len),
            ("synth_dialogs", self.synth_dialogs),
            ("synth_regions", self.synth_regions),
            ("synth_candidates", self.synth_candidates),
            ("synth_rounds", self.synth_rounds),
            ("synth_d_img", self.synth_d_img),
            ("samples", self.samples),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("{k} must be positive")));
        }
        if !(self.tau > 0.0) {
            return Err(config_err("tau must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(config_err("lr must be positive"));
        }
        if !(self.alpha >= 0.0) || !(self.lambda >= 0.0) || !(self.grad_clip >= 0.0) || !(self.synth_noise >= 0.0) {
            return Err(config_err("alpha, lambda, grad_clip and synth_noise must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err("val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab: usize, d_img: usize) -> EncoderConfig {
        EncoderConfig { vocab, emb: self.emb, d: self.d, d_img }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, max_grad_norm: (self.grad_clip > 0.0).then_some(self.grad_clip), ..AdamConfig::default() }
    }

    pub fn gumbel(&self) -> GumbelConfig {
        GumbelConfig { temperature: self.tau, max_len: self.max_answer_len, hard_forward: true }
    }
}
