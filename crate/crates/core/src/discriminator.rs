//! Discriminative answer ranker.
//!
//! Answers are embedded by an LSTM whose per-step outputs are pooled with a
//! one-hidden-layer attention MLP, `u_j = w2 tanh(W1 s_j + b1)`. The score of
//! an answer is `e_t · f(a)`.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Round;
use crate::encoder::{DialogEncoding, Encoder, EncoderConfig, EncoderInput};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{init_uniform, Bound, Lstm, ParamId, ParamStore, INIT_SCALE};

/// Stands in for `-inf` on padded steps before the softmax over steps.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct AnswerEmbedding {
    /// `d x n`, one column per answer.
    pub f: Var,
    /// `T x n` attention over steps; padded steps get weight 0.
    pub weights: Var,
}

/// One ground-truth answer and its negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NPairBatch {
    pub gt: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl NPairBatch {
    pub fn new(gt: Vec<usize>, negatives: Vec<Vec<usize>>) -> Result<Self> {
        if negatives.is_empty() {
            return contract_err("an n-pair batch needs at least one negative");
        }
        if negatives.contains(&gt) {
            return contract_err("negative identical to the ground truth");
        }
        Ok(NPairBatch { gt, negatives })
    }

    /// The first `max_negatives` candidates that differ from the answer.
    pub fn from_round(round: &Round, max_negatives: usize) -> Result<Self> {
        let negatives = round.candidates.iter().filter(|c| **c != round.answer).take(max_negatives).cloned().collect();
        NPairBatch::new(round.answer.clone(), negatives)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: EncoderConfig,
    pub encoder: Encoder,
    pub embed: ParamId,
    pub lstm: Lstm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(store, "enc", cfg, rng)?;
        let EncoderConfig { vocab, emb, d, .. } = cfg;
        let hidden = (d / 2).max(1);
        let embed = store.add("ans.embed", init_uniform(&[emb, vocab], INIT_SCALE, rng))?;
        let lstm = Lstm::new(store, "ans.lstm", emb, d, rng)?;
        let w1 = store.add("ans.w1", init_uniform(&[hidden, d], INIT_SCALE, rng))?;
        let b1 = store.add("ans.b1", Tensor::zeros(&[hidden]))?;
        let w2 = store.add("ans.w2", init_uniform(&[1, hidden], INIT_SCALE, rng))?;
        Ok(Discriminator { cfg, encoder, embed, lstm, w1, b1, w2 })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, input: &EncoderInput) -> Result<DialogEncoding> {
        self.encoder.encode_round(tape, p, input)
    }

    pub fn encode_many(&self, tape: &mut Tape, p: &Bound, inputs: &[EncoderInput]) -> Result<(Var, Vec<DialogEncoding>)> {
        self.encoder.encode_many(tape, p, inputs)
    }

    fn pool(&self, tape: &mut Tape, p: &Bound, xs: &[Var], lengths: &[usize]) -> Result<AnswerEmbedding> {
        let run = self.lstm.run_inputs(tape, p, xs, lengths, None)?;
        let n = lengths.len();
        let steps = run.outputs.len();
        let mut us = Vec::with_capacity(steps);
        for &s in &run.outputs {
            let a = tape.matmul(p[self.w1], s)?;
            let a = tape.add(a, p[self.b1])?;
            let a = tape.tanh(a);
            us.push(tape.matmul(p[self.w2], a)?);
        }
        let u = if steps == 1 { us[0] } else { tape.concat(&us, 0)? };
        let u = if lengths.iter().all(|&l| l == steps) {
            u
        } else {
            let mask: Vec<bool> = (0..steps).flat_map(|j| lengths.iter().map(move |&l| j < l)).collect();
            let off = tape.constant(Tensor::matrix(steps, n, vec![MASKED; steps * n])?);
            tape.select(&mask, u, off)?
        };
        let weights = tape.softmax(u, 0)?;
        let ones = tape.constant(Tensor::matrix(self.cfg.d, 1, vec![1.0; self.cfg.d])?);
        let mut f: Option<Var> = None;
        for (j, &s) in run.outputs.iter().enumerate() {
            let w = if steps == 1 { weights } else { tape.slice(weights, 0, j, 1)? };
            let w = tape.matmul(ones, w)?;
            let term = tape.mul(s, w)?;
            f = Some(match f {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(AnswerEmbedding { f: f.expect("at least one step"), weights })
    }

    /// Embeds token sequences, one column each.
    pub fn embed_answers(&self, tape: &mut Tape, p: &Bound, seqs: &[&[usize]]) -> Result<AnswerEmbedding> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return contract_err("answers to embed must be non-empty");
        }
        if let Some(&t) = seqs.iter().flat_map(|s| s.iter()).find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", self.cfg.vocab)));
        }
        let steps = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut xs = Vec::with_capacity(steps);
        for j in 0..steps {
            let toks: Vec<usize> = seqs.iter().map(|s| s.get(j).copied().unwrap_or(0)).collect();
            xs.push(tape.embedding(p[self.embed], &toks)?);
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.pool(tape, p, &xs, &lengths)
    }

    /// Embeds one answer given as `V x 1` token distributions; each step's
    /// input is `E · dist`.
    pub fn embed_soft(&self, tape: &mut Tape, p: &Bound, dists: &[Var]) -> Result<AnswerEmbedding> {
        if dists.is_empty() {
            return contract_err("answers to embed must be non-empty");
        }
        let mut xs = Vec::with_capacity(dists.len());
        for &d in dists {
            if tape.value(d).dims2() != (self.cfg.vocab, 1) {
                return shape_err(format!("token distribution {:?}", tape.value(d).shape()));
            }
            xs.push(tape.matmul(p[self.embed], d)?);
        }
        self.pool(tape, p, &xs, &[dists.len()])
    }

    /// `1 x n` scores `e_t^T f`.
    pub fn score(&self, tape: &mut Tape, e_t: Var, f: Var) -> Result<Var> {
        score(tape, e_t, f)
    }

    pub fn rank_candidates(&self, tape: &mut Tape, p: &Bound, e_t: Var, candidates: &[Vec<usize>]) -> Result<Vec<f64>> {
        let seqs: Vec<&[usize]> = candidates.iter().map(Vec::as_slice).collect();
        let emb = self.embed_answers(tape, p, &seqs)?;
        let s = score(tape, e_t, emb.f)?;
        Ok(tape.value(s).values().to_vec())
    }

    /// N-pair loss of a batch, optionally with extra negative embeddings
    /// (`d x m`) appended after the dataset negatives.
    pub fn npair_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        e_t: Var,
        batch: &NPairBatch,
        extra_negatives: Option<Var>,
        lambda: f64,
    ) -> Result<Var> {
        let mut seqs: Vec<&[usize]> = vec![&batch.gt];
        seqs.extend(batch.negatives.iter().map(Vec::as_slice));
        let emb = self.embed_answers(tape, p, &seqs)?;
        let f = match extra_negatives {
            Some(x) => tape.concat(&[emb.f, x], 1)?,
            None => emb.f,
        };
        npair_from_embeddings(tape, e_t, f, lambda)
    }
}

/// `1 x n` inner products of a `d x 1` encoding with the columns of `f`.
pub fn score(tape: &mut Tape, e_t: Var, f: Var) -> Result<Var> {
    let (d, c) = tape.value(e_t).dims2();
    if c != 1 || tape.value(f).dims2().0 != d {
        return shape_err(format!("score: e {:?}, f {:?}", tape.value(e_t).shape(), tape.value(f).shape()));
    }
    let et = tape.transpose(e_t);
    tape.matmul(et, f)
}

/// `log(1 + Σ exp(s_i - s_0)) + λ(‖f_0‖² + mean_i ‖f_i‖²)` where column 0
/// of `f` is the ground truth and the rest are negatives.
pub fn npair_from_embeddings(tape: &mut Tape, e_t: Var, f: Var, lambda: f64) -> Result<Var> {
    let n = tape.value(f).dims2().1;
    if n < 2 {
        return contract_err("n-pair loss needs at least one negative");
    }
    let s = score(tape, e_t, f)?;
    let ls = tape.log_softmax(s, 1)?;
    let gt = tape.gather(ls, &[(0, 0)])?;
    let loss = tape.neg(gt);
    if lambda == 0.0 {
        return Ok(loss);
    }
    let sq = tape.mul(f, f)?;
    let pos = tape.slice(sq, 1, 0, 1)?;
    let pos = tape.sum(pos);
    let neg = tape.slice(sq, 1, 1, n - 1)?;
    let neg = tape.sum(neg);
    let neg = tape.scale(neg, 1.0 / (n - 1) as f64);
    let reg = tape.add(pos, neg)?;
    let reg = tape.scale(reg, lambda);
    tape.add(loss, reg)
}
