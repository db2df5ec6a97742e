//! Retrieval metrics over candidate lists.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dialog;
use crate::data::FeatureStore;
use crate::error::{contract_err, Error, Result};

/// How candidates that tie with the ground truth are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Ties rank behind the ground truth.
    #[default]
    Optimistic,
    /// Ties rank ahead of the ground truth.
    Pessimistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    pub scores: Vec<f64>,
    pub gt_index: usize,
}

impl CandidateScores {
    pub fn new(scores: Vec<f64>, gt_index: usize) -> Result<Self> {
        if gt_index >= scores.len() {
            return Err(Error::Index(format!("gt index {gt_index} with {} candidates", scores.len())));
        }
        Ok(CandidateScores { scores, gt_index })
    }
}

/// 1-based rank of the ground truth.
pub fn rank_of_gt(cs: &CandidateScores, policy: TiePolicy) -> Result<usize> {
    if cs.scores.iter().any(|s| s.is_nan()) {
        return contract_err("NaN candidate score");
    }
    let gt = cs.scores[cs.gt_index];
    let ahead = cs
        .scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| {
            i != cs.gt_index
                && match policy {
                    TiePolicy::Optimistic => s > gt,
                    TiePolicy::Pessimistic => s >= gt,
                }
        })
        .count();
    Ok(1 + ahead)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    pub count: usize,
}

pub fn aggregate(ranks: &[usize], n: usize) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return contract_err("no ranks to aggregate");
    }
    if let Some(r) = ranks.iter().find(|&&r| r == 0 || r > n) {
        return contract_err(format!("rank {r} outside 1..={n}"));
    }
    let m = ranks.len() as f64;
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / m;
    Ok(RetrievalReport {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / m,
        r_at_1: recall(1),
        r_at_5: recall(5),
        r_at_10: recall(10),
        mean_rank: ranks.iter().sum::<usize>() as f64 / m,
        count: ranks.len(),
    })
}

/// Ranks every round of every dialog with `scorer(dialog, round, image)`.
pub fn evaluate_rounds<F>(dialogs: &[Dialog], features: &FeatureStore, policy: TiePolicy, mut scorer: F) -> Result<RetrievalReport>
where
    F: FnMut(&Dialog, usize, &Tensor) -> Result<Vec<f64>>,
{
    let mut ranks = Vec::new();
    let mut n = 0;
    for d in dialogs {
        let image = features.get(&d.image_id).ok_or_else(|| Error::Reference(format!("no features for image {}", d.image_id)))?;
        for (r, round) in d.rounds.iter().enumerate() {
            let scores = scorer(d, r, image)?;
            n = n.max(scores.len());
            ranks.push(rank_of_gt(&CandidateScores::new(scores, round.gt_index)?, policy)?);
        }
    }
    aggregate(&ranks, n)
}

/// Aligned table with columns MRR, R@1, R@5, R@10, Mean.
pub fn format_table(rows: &[(String, RetrievalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n", "Model", "MRR", "R@1", "R@5", "R@10", "Mean");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.4}  {:>6.2}  {:>6.2}  {:>6.2}  {:>6.2}",
            name,
            r.mrr,
            100.0 * r.r_at_1,
            100.0 * r.r_at_5,
            100.0 * r.r_at_10,
            r.mean_rank
        );
    }
    out
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub model: String,
    pub mrr: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mean_rank: f64,
    pub count: usize,
    /// Validation loss of the model's own objective.
    pub mean_loss: Option<f64>,
    /// Mean training objective over the epoch; absent for the initial evaluation.
    pub train_loss: Option<f64>,
    /// Mean perceptual loss over the epoch, generator in adaptation phases only.
    pub perceptual_loss: Option<f64>,
    pub tie_policy: TiePolicy,
}

impl MetricsRecord {
    pub fn new(phase: &str, epoch: usize, split: &str, model: &str, r: &RetrievalReport, tie_policy: TiePolicy) -> Self {
        MetricsRecord {
            phase: phase.into(),
            epoch,
            split: split.into(),
            model: model.into(),
            mrr: r.mrr,
            r_at_1: r.r_at_1,
            r_at_5: r.r_at_5,
            r_at_10: r.r_at_10,
            mean_rank: r.mean_rank,
            count: r.count,
            mean_loss: None,
            train_loss: None,
            perceptual_loss: None,
            tie_policy,
        }
    }

    pub fn report(&self) -> RetrievalReport {
        RetrievalReport {
            mrr: self.mrr,
            r_at_1: self.r_at_1,
            r_at_5: self.r_at_5,
            r_at_10: self.r_at_10,
            mean_rank: self.mean_rank,
            count: self.count,
        }
    }
}

pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).expect("metrics serialize");
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { location: format!("{}:{}", path.display(), i + 1), message: e.to_string() })
        })
        .collect()
}
