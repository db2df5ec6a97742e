//! Training phases: generator MLE pretraining, discriminator n-pair
//! pretraining, then adaptation of the generator through the
//! discriminator's metric space (optionally with adversarial D updates).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{Mode, RunConfig, ScoreNorm};
use crate::data::{
    corpus_texts, examples, read_raw_dialogs, split_dialogs, synth_generate, tokenize_dialogs, Dialog, Example, FeatureStore, Round,
    SynthConfig, SynthData, Vocabulary,
};
use crate::discriminator::{score, Discriminator, NPairBatch};
use crate::encoder::{EncoderConfig, EncoderInput};
use crate::error::{Error, Result};
use crate::eval::{append_metrics, evaluate_rounds, MetricsRecord, RetrievalReport};
use crate::generator::{Generator, GumbelNoise};
use crate::nn::{read_checkpoint, write_checkpoint, Adam, ParamStore};

/// Mixes `parts` into one seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Train and validation dialogs over one feature store.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Dialog>,
    pub val: Vec<Dialog>,
    pub features: FeatureStore,
    pub vocab_size: usize,
}

impl Corpus {
    /// Reads the configured vocabulary, dialog files and feature store.
    pub fn load(cfg: &RunConfig) -> Result<(Corpus, Vocabulary)> {
        let vocab = Vocabulary::load(Path::new(&cfg.vocab))?;
        let features = FeatureStore::read(Path::new(&cfg.features))?;
        let train = tokenize_dialogs(&read_raw_dialogs(Path::new(&cfg.train_dialogs))?, &vocab, &features)?;
        let val = tokenize_dialogs(&read_raw_dialogs(Path::new(&cfg.val_dialogs))?, &vocab, &features)?;
        let vocab_size = vocab.len();
        Ok((Corpus { train, val, features, vocab_size }, vocab))
    }

    /// Synthetic benchmark from the `synth_*` keys, split by `val_fraction`.
    /// Every word of the generated corpus enters the vocabulary.
    pub fn synthetic(cfg: &RunConfig) -> Result<(Corpus, Vocabulary, SynthData)> {
        let data = synth_generate(&synth_config(cfg))?;
        let vocab = Vocabulary::build(corpus_texts(&data.dialogs), 1);
        let dialogs = tokenize_dialogs(&data.dialogs, &vocab, &data.features)?;
        let (train, val) = split_dialogs(&dialogs, cfg.val_fraction);
        let corpus = Corpus { train, val, features: data.features.clone(), vocab_size: vocab.len() };
        Ok((corpus, vocab, data))
    }
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    let mut sc = SynthConfig::new(cfg.seed, cfg.synth_dialogs, cfg.synth_vocab, cfg.synth_regions, cfg.synth_candidates);
    sc.rounds = cfg.synth_rounds;
    sc.d_img = cfg.synth_d_img;
    sc.noise = cfg.synth_noise;
    sc
}

/// Owned histories and borrowed images/rounds for a list of examples.
struct Prepared<'a> {
    histories: Vec<Vec<Vec<usize>>>,
    images: Vec<&'a Tensor>,
    rounds: Vec<&'a Round>,
}

impl<'a> Prepared<'a> {
    fn new(dialogs: &'a [Dialog], features: &'a FeatureStore, exs: &[Example]) -> Result<Self> {
        if exs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut out = Prepared { histories: Vec::new(), images: Vec::new(), rounds: Vec::new() };
        for ex in exs {
            let dialog = &dialogs[ex.dialog];
            let image =
                features.get(&dialog.image_id).ok_or_else(|| Error::Reference(format!("no features for image {}", dialog.image_id)))?;
            out.histories.push(dialog.history(ex.round));
            out.images.push(image);
            out.rounds.push(&dialog.rounds[ex.round]);
        }
        Ok(out)
    }

    fn inputs(&self) -> Vec<EncoderInput<'_>> {
        (0..self.rounds.len())
            .map(|i| EncoderInput { image: self.images[i], history: &self.histories[i], question: &self.rounds[i].question })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Models {
    pub g_store: ParamStore,
    pub g: Generator,
    pub d_store: ParamStore,
    pub d: Discriminator,
}

impl Models {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut g_store = ParamStore::new();
        let g = Generator::new(&mut g_store, cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1])))?;
        let mut d_store = ParamStore::new();
        let d = Discriminator::new(&mut d_store, cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2])))?;
        Ok(Models { g_store, g, d_store, d })
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = self.g_store.named("g");
        out.extend(self.d_store.named("d"));
        out
    }

    pub fn load_named(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        self.g_store.load_named("g", entries)?;
        self.d_store.load_named("d", entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.named())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_named(&read_checkpoint(path)?)
    }
}

/// Training examples drawn from one split.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub dialogs: &'a [Dialog],
    pub features: &'a FeatureStore,
    pub examples: &'a [Example],
}

fn finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss is {loss}")))
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn mean_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let s = sum_vars(tape, vars)?;
    Ok(tape.scale(s, 1.0 / vars.len() as f64))
}

/// `log(1 + exp(s_gt - s_hat))`: the sampled answer `dists` (one `V x 1`
/// carrier per step) against the ground truth, both embedded by D and scored
/// against D's encoding `e_d`.
pub fn perceptual_loss(tape: &mut Tape, d: &Discriminator, pd: &crate::nn::Bound, e_d: Var, dists: &[Var], gt: &[usize]) -> Result<Var> {
    let f_hat = d.embed_soft(tape, pd, dists)?.f;
    let f_gt = d.embed_answers(tape, pd, &[gt])?.f;
    let f = tape.concat(&[f_hat, f_gt], 1)?;
    perceptual_from_embeddings(tape, e_d, f)
}

/// Column 0 of `f` is the sample, column 1 the ground truth.
pub fn perceptual_from_embeddings(tape: &mut Tape, e_d: Var, f: Var) -> Result<Var> {
    let s = score(tape, e_d, f)?;
    let ls = tape.log_softmax(s, 1)?;
    let first = tape.gather(ls, &[(0, 0)])?;
    Ok(tape.neg(first))
}

/// Gradients of the mean per-token MLE loss with respect to G.
pub fn g_mle_grads(models: &Models, batch: Batch) -> Result<(Vec<Vec<f64>>, f64)> {
    let prep = Prepared::new(batch.dialogs, batch.features, batch.examples)?;
    let mut tape = Tape::new();
    let pg = models.g_store.bind(&mut tape, true);
    let enc = models.g.encode_many(&mut tape, &pg, &prep.inputs())?.1;
    let es: Vec<Var> = enc.iter().map(|x| x.e_t).collect();
    let gts: Vec<&[usize]> = prep.rounds.iter().map(|r| r.answer.as_slice()).collect();
    let loss = models.g.mle_loss_batch(&mut tape, &pg, &es, &gts)?;
    let value = tape.item(loss);
    finite(value, "mle")?;
    tape.backward(loss)?;
    Ok((models.g_store.grads(&tape, &pg), value))
}

/// Gradients of the mean n-pair loss with respect to D.
pub fn d_npair_grads(models: &Models, batch: Batch, cfg: &RunConfig) -> Result<(Vec<Vec<f64>>, f64)> {
    let prep = Prepared::new(batch.dialogs, batch.features, batch.examples)?;
    let mut tape = Tape::new();
    let pd = models.d_store.bind(&mut tape, true);
    let enc = models.d.encode_many(&mut tape, &pd, &prep.inputs())?.1;
    let mut losses = Vec::with_capacity(enc.len());
    for (x, round) in enc.iter().zip(&prep.rounds) {
        let nb = NPairBatch::from_round(round, cfg.npair_negatives)?;
        losses.push(models.d.npair_loss(&mut tape, &pd, x.e_t, &nb, None, cfg.lambda)?);
    }
    let loss = mean_vars(&mut tape, &losses)?;
    let value = tape.item(loss);
    finite(value, "n-pair")?;
    tape.backward(loss)?;
    Ok((models.d_store.grads(&tape, &pd), value))
}

/// Losses of one generator adaptation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferLosses {
    pub perceptual: f64,
    pub mle: f64,
}

/// Gradients of `L_G + alpha * L_MLE` with respect to G; D is bound as
/// constants. Example `i` uses Gumbel noise seeded by `(noise_seed, i)`.
pub fn transfer_grads(
    models: &Models,
    batch: Batch,
    cfg: &RunConfig,
    noise_seed: u64,
    alpha: f64,
) -> Result<(Vec<Vec<f64>>, TransferLosses)> {
    let prep = Prepared::new(batch.dialogs, batch.features, batch.examples)?;
    let inputs = prep.inputs();
    let mut tape = Tape::new();
    let pg = models.g_store.bind(&mut tape, true);
    let pd = models.d_store.bind(&mut tape, false);
    let gumbel = cfg.gumbel();
    let e_g = models.g.encode_many(&mut tape, &pg, &inputs)?.1;
    let e_d = models.d.encode_many(&mut tape, &pd, &inputs)?.1;
    let mut lg = Vec::with_capacity(inputs.len());
    for (i, round) in prep.rounds.iter().enumerate() {
        let mut noise = GumbelNoise::seeded(derive_seed(&[noise_seed, i as u64]));
        let sample = models.g.sample_answer(&mut tape, &pg, e_g[i].e_t, &gumbel, &mut noise)?;
        lg.push(perceptual_loss(&mut tape, &models.d, &pd, e_d[i].e_t, &sample.st, &round.answer)?);
    }
    let es: Vec<Var> = e_g.iter().map(|x| x.e_t).collect();
    let gts: Vec<&[usize]> = prep.rounds.iter().map(|r| r.answer.as_slice()).collect();
    let lm = models.g.mle_loss_batch(&mut tape, &pg, &es, &gts)?;
    let lg = mean_vars(&mut tape, &lg)?;
    let losses = TransferLosses { perceptual: tape.item(lg), mle: tape.item(lm) };
    let weighted = tape.scale(lm, alpha);
    let total = tape.add(lg, weighted)?;
    finite(tape.item(total), "transfer")?;
    tape.backward(total)?;
    Ok((models.g_store.grads(&tape, &pg), losses))
}

/// Discriminator objective in the adversarial regimes.
fn adversarial_d_grads(models: &Models, batch: Batch, cfg: &RunConfig, noise_seed: u64) -> Result<(Vec<Vec<f64>>, f64)> {
    let prep = Prepared::new(batch.dialogs, batch.features, batch.examples)?;
    let inputs = prep.inputs();
    let mut tape = Tape::new();
    let pg = models.g_store.bind(&mut tape, false);
    let pd = models.d_store.bind(&mut tape, true);
    let gumbel = cfg.gumbel();
    let e_g = models.g.encode_many(&mut tape, &pg, &inputs)?.1;
    let e_d = models.d.encode_many(&mut tape, &pd, &inputs)?.1;
    let mut losses = Vec::with_capacity(inputs.len());
    for (i, round) in prep.rounds.iter().enumerate() {
        let mut noise = GumbelNoise::seeded(derive_seed(&[noise_seed, i as u64]));
        let sample = models.g.sample_answer(&mut tape, &pg, e_g[i].e_t, &gumbel, &mut noise)?;
        let e = e_d[i].e_t;
        let loss = match cfg.mode {
            Mode::Gan1 => {
                let l = perceptual_loss(&mut tape, &models.d, &pd, e, &sample.st, &round.answer)?;
                tape.neg(l)
            }
            Mode::Gan2 => {
                let f_hat = models.d.embed_soft(&mut tape, &pd, &sample.st)?.f;
                let nb = NPairBatch::from_round(round, cfg.npair_negatives)?;
                models.d.npair_loss(&mut tape, &pd, e, &nb, Some(f_hat), cfg.lambda)?
            }
            Mode::Transfer => return Err(Error::Contract("the discriminator is frozen in transfer mode".into())),
        };
        losses.push(loss);
    }
    let loss = mean_vars(&mut tape, &losses)?;
    let value = tape.item(loss);
    finite(value, "discriminator")?;
    tape.backward(loss)?;
    Ok((models.d_store.grads(&tape, &pd), value))
}

pub fn g_mle_step(models: &mut Models, adam: &mut Adam, batch: Batch) -> Result<f64> {
    let (grads, loss) = g_mle_grads(models, batch)?;
    adam.step(&mut models.g_store, &grads)?;
    Ok(loss)
}

pub fn d_npair_step(models: &mut Models, adam: &mut Adam, batch: Batch, cfg: &RunConfig) -> Result<f64> {
    let (grads, loss) = d_npair_grads(models, batch, cfg)?;
    adam.step(&mut models.d_store, &grads)?;
    Ok(loss)
}

/// One step on `L_G + alpha * L_MLE` for G. D is untouched.
pub fn transfer_step(models: &mut Models, adam: &mut Adam, batch: Batch, cfg: &RunConfig, noise_seed: u64) -> Result<TransferLosses> {
    let (grads, losses) = transfer_grads(models, batch, cfg, noise_seed, cfg.alpha)?;
    adam.step(&mut models.g_store, &grads)?;
    Ok(losses)
}

/// One D step on `-L_G`. G is untouched.
pub fn gan1_d_step(models: &mut Models, adam: &mut Adam, batch: Batch, cfg: &RunConfig, noise_seed: u64) -> Result<f64> {
    let cfg = RunConfig { mode: Mode::Gan1, ..cfg.clone() };
    let (grads, loss) = adversarial_d_grads(models, batch, &cfg, noise_seed)?;
    adam.step(&mut models.d_store, &grads)?;
    Ok(loss)
}

/// One D step on the n-pair loss with the generated answer appended to the
/// negatives. G is untouched.
pub fn gan2_d_step(models: &mut Models, adam: &mut Adam, batch: Batch, cfg: &RunConfig, noise_seed: u64) -> Result<f64> {
    let cfg = RunConfig { mode: Mode::Gan2, ..cfg.clone() };
    let (grads, loss) = adversarial_d_grads(models, batch, &cfg, noise_seed)?;
    adam.step(&mut models.d_store, &grads)?;
    Ok(loss)
}

/// Encodings of every round of `dialog`, as values.
fn dialog_encodings(
    encode: impl Fn(&mut Tape, &[EncoderInput]) -> Result<(Var, Vec<crate::encoder::DialogEncoding>)>,
    dialog: &Dialog,
    image: &Tensor,
) -> Result<Vec<Tensor>> {
    let histories: Vec<Vec<Vec<usize>>> = (0..dialog.rounds.len()).map(|r| dialog.history(r)).collect();
    let inputs: Vec<EncoderInput> =
        dialog.rounds.iter().zip(&histories).map(|(round, h)| EncoderInput { image, history: h, question: &round.question }).collect();
    let mut tape = Tape::new();
    let (_, enc) = encode(&mut tape, &inputs)?;
    Ok(enc.iter().map(|x| tape.value(x.e_t).clone()).collect())
}

/// Retrieval report of G (log-likelihood ranking) and its mean per-token
/// NLL on the ground-truth answers.
pub fn evaluate_generator(models: &Models, dialogs: &[Dialog], features: &FeatureStore, cfg: &RunConfig) -> Result<(RetrievalReport, f64)> {
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut cache = Vec::new();
    let report = evaluate_rounds(dialogs, features, cfg.tie_policy, |dialog, r, image| {
        if r == 0 {
            cache = dialog_encodings(
                |tape, inputs| {
                    let pg = models.g_store.bind(tape, false);
                    models.g.encode_many(tape, &pg, inputs)
                },
                dialog,
                image,
            )?;
        }
        let round = &dialog.rounds[r];
        let mut tape = Tape::new();
        let pg = models.g_store.bind(&mut tape, false);
        let e = tape.constant(cache[r].clone());
        let mean = models.g.score_candidates(&mut tape, &pg, e, &round.candidates, true)?;
        nll -= mean[round.gt_index];
        count += 1;
        match cfg.score_norm {
            ScoreNorm::Mean => Ok(mean),
            ScoreNorm::Sum => models.g.score_candidates(&mut tape, &pg, e, &round.candidates, false),
        }
    })?;
    Ok((report, nll / count as f64))
}

/// Retrieval report of D and its mean n-pair loss (same negatives as in
/// training).
pub fn evaluate_discriminator(
    models: &Models,
    dialogs: &[Dialog],
    features: &FeatureStore,
    cfg: &RunConfig,
) -> Result<(RetrievalReport, f64)> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut cache = Vec::new();
    let report = evaluate_rounds(dialogs, features, cfg.tie_policy, |dialog, r, image| {
        if r == 0 {
            cache = dialog_encodings(
                |tape, inputs| {
                    let pd = models.d_store.bind(tape, false);
                    models.d.encode_many(tape, &pd, inputs)
                },
                dialog,
                image,
            )?;
        }
        let round = &dialog.rounds[r];
        let mut tape = Tape::new();
        let pd = models.d_store.bind(&mut tape, false);
        let e = tape.constant(cache[r].clone());
        let seqs: Vec<&[usize]> = round.candidates.iter().map(Vec::as_slice).collect();
        let emb = models.d.embed_answers(&mut tape, &pd, &seqs)?;
        let s = score(&mut tape, e, emb.f)?;
        let scores = tape.value(s).values().to_vec();
        let f = tape.value(emb.f);
        let norm2 = |j: usize| f.column_values(j).iter().map(|x| x * x).sum::<f64>();
        let negs: Vec<usize> = (0..seqs.len()).filter(|&j| round.candidates[j] != round.answer).take(cfg.npair_negatives).collect();
        if !negs.is_empty() {
            let gt = scores[round.gt_index];
            let margins: Vec<f64> = std::iter::once(0.0).chain(negs.iter().map(|&j| scores[j] - gt)).collect();
            let m = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + margins.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let reg = norm2(round.gt_index) + negs.iter().map(|&j| norm2(j)).sum::<f64>() / negs.len() as f64;
            total += lse + cfg.lambda * reg;
            count += 1;
        }
        Ok(scores)
    })?;
    Ok((report, if count == 0 { f64::NAN } else { total / count as f64 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    PretrainG,
    PretrainD,
    /// Phase 3, regime chosen by `RunConfig::mode`.
    Adapt,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::PretrainG, Phase::PretrainD, Phase::Adapt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self, mode: Mode) -> &'static str {
        match self {
            Phase::PretrainG => "pretrain_g",
            Phase::PretrainD => "pretrain_d",
            Phase::Adapt => mode.name(),
        }
    }

    pub fn epochs(self, cfg: &RunConfig) -> usize {
        match self {
            Phase::PretrainG => cfg.g_epochs,
            Phase::PretrainD => cfg.d_epochs,
            Phase::Adapt => cfg.phase3_epochs,
        }
    }

    fn trains_g(self) -> bool {
        self != Phase::PretrainD
    }

    fn trains_d(self, mode: Mode) -> bool {
        match self {
            Phase::PretrainG => false,
            Phase::PretrainD => true,
            Phase::Adapt => mode != Mode::Transfer,
        }
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STATE_FILE: &str = "state.ckpt";

#[derive(Debug, Clone, Copy, PartialEq)]
struct EpochLosses {
    g: Option<f64>,
    d: Option<f64>,
    perceptual: Option<f64>,
}

/// Runs phases epoch by epoch, logging validation metrics and saving a
/// resumable state after every epoch.
///
/// Step 0 of a phase is the evaluation of the incoming models; step `e`
/// is training epoch `e`. Optimizer moments restart at each phase.
pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub models: Models,
    pub g_adam: Adam,
    pub d_adam: Adam,
    corpus: &'a Corpus,
    run_dir: PathBuf,
    phase: Phase,
    step: usize,
    best_g: f64,
    best_d: f64,
}

impl<'a> Trainer<'a> {
    /// Fresh models initialized from `cfg.seed`, positioned at `start`.
    pub fn new(cfg: RunConfig, corpus: &'a Corpus, run_dir: &Path, start: Phase) -> Result<Self> {
        let ecfg = cfg.encoder_config(corpus.vocab_size, corpus.features.d_img());
        let models = Models::new(ecfg, cfg.seed)?;
        Ok(Trainer::with_models(cfg, corpus, run_dir, models, start))
    }

    pub fn with_models(cfg: RunConfig, corpus: &'a Corpus, run_dir: &Path, models: Models, start: Phase) -> Self {
        let g_adam = Adam::new(cfg.adam(), &models.g_store);
        let d_adam = Adam::new(cfg.adam(), &models.d_store);
        Trainer {
            cfg,
            models,
            g_adam,
            d_adam,
            corpus,
            run_dir: run_dir.to_path_buf(),
            phase: start,
            step: 0,
            best_g: f64::NEG_INFINITY,
            best_d: f64::NEG_INFINITY,
        }
    }

    /// Continues from `run_dir/state.ckpt`.
    pub fn resume(cfg: RunConfig, corpus: &'a Corpus, run_dir: &Path) -> Result<Self> {
        let entries = read_checkpoint(&run_dir.join(STATE_FILE))?;
        let mut t = Trainer::new(cfg, corpus, run_dir, Phase::PretrainG)?;
        t.models.load_named(&entries)?;
        t.g_adam.load_named("adam_g", &t.models.g_store, &entries)?;
        t.d_adam.load_named("adam_d", &t.models.d_store, &entries)?;
        let meta = |k: &str| -> Result<f64> {
            entries.get(&format!("meta.{k}")).map(|t| t.item()).ok_or_else(|| Error::Checkpoint(format!("missing meta.{k}")))
        };
        t.phase = *Phase::ALL.get(meta("phase")? as usize).ok_or_else(|| Error::Checkpoint("bad phase index".into()))?;
        t.step = meta("step")? as usize;
        t.best_g = meta("best_g")?;
        t.best_d = meta("best_d")?;
        Ok(t)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join(METRICS_FILE)
    }

    fn save_state(&self) -> Result<()> {
        let mut entries = self.models.named();
        entries.extend(self.g_adam.named("adam_g", &self.models.g_store));
        entries.extend(self.d_adam.named("adam_d", &self.models.d_store));
        for (k, v) in [("phase", self.phase.index() as f64), ("step", self.step as f64), ("best_g", self.best_g), ("best_d", self.best_d)] {
            entries.push((format!("meta.{k}"), Tensor::scalar(v)));
        }
        let tmp = self.run_dir.join(format!("{STATE_FILE}.tmp"));
        write_checkpoint(&tmp, &entries)?;
        fs::rename(&tmp, self.run_dir.join(STATE_FILE))?;
        Ok(())
    }

    /// Trains through `last` (inclusive). With `stop_after`, returns after
    /// that many phase steps have run in this call; the state file allows
    /// picking up later. Returns true when `last` is complete.
    pub fn run_until(&mut self, last: Phase, stop_after: Option<usize>) -> Result<bool> {
        fs::create_dir_all(&self.run_dir)?;
        let mut budget = stop_after.unwrap_or(usize::MAX);
        while self.phase <= last {
            if self.step > self.phase.epochs(&self.cfg) {
                let done = self.phase;
                self.models.save(&self.run_dir.join(format!("{}.ckpt", done.name(self.cfg.mode))))?;
                match Phase::ALL.get(done.index() + 1) {
                    Some(&next) => {
                        self.phase = next;
                        self.step = 0;
                        self.save_state()?;
                    }
                    None => {
                        self.step = usize::MAX;
                        return Ok(true);
                    }
                }
                if done == last {
                    return Ok(true);
                }
                continue;
            }
            if budget == 0 {
                return Ok(false);
            }
            if self.step == 0 {
                self.g_adam = Adam::new(self.cfg.adam(), &self.models.g_store);
                self.d_adam = Adam::new(self.cfg.adam(), &self.models.d_store);
                self.log_epoch(None)?;
            } else {
                let losses = self.train_epoch()?;
                self.log_epoch(Some(losses))?;
            }
            self.step += 1;
            budget -= 1;
            self.save_state()?;
        }
        Ok(true)
    }

    fn train_epoch(&mut self) -> Result<EpochLosses> {
        let phase = self.phase;
        let epoch = self.step;
        let cfg = self.cfg.clone();
        let corpus = self.corpus;
        let mut order = examples(&corpus.train);
        if order.is_empty() {
            return Err(Error::Contract("no training examples".into()));
        }
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, phase.index() as u64, epoch as u64])));
        let mut g_sum = 0.0;
        let mut d_sum = 0.0;
        let mut p_sum = 0.0;
        let mut n = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch { dialogs: &corpus.train, features: &corpus.features, examples: chunk };
            let seed = |kind: u64| derive_seed(&[cfg.seed, phase.index() as u64, epoch as u64, b as u64, kind]);
            match phase {
                Phase::PretrainG => g_sum += g_mle_step(&mut self.models, &mut self.g_adam, batch)?,
                Phase::PretrainD => d_sum += d_npair_step(&mut self.models, &mut self.d_adam, batch, &cfg)?,
                Phase::Adapt => {
                    let l = transfer_step(&mut self.models, &mut self.g_adam, batch, &cfg, seed(0))?;
                    g_sum += l.perceptual + cfg.alpha * l.mle;
                    p_sum += l.perceptual;
                    d_sum += match cfg.mode {
                        Mode::Transfer => 0.0,
                        Mode::Gan1 => gan1_d_step(&mut self.models, &mut self.d_adam, batch, &cfg, seed(1))?,
                        Mode::Gan2 => gan2_d_step(&mut self.models, &mut self.d_adam, batch, &cfg, seed(1))?,
                    };
                }
            }
            n += 1;
        }
        let avg = |s: f64| s / n as f64;
        Ok(EpochLosses {
            g: phase.trains_g().then(|| avg(g_sum)),
            d: phase.trains_d(cfg.mode).then(|| avg(d_sum)),
            perceptual: (phase == Phase::Adapt).then(|| avg(p_sum)),
        })
    }

    fn log_epoch(&mut self, losses: Option<EpochLosses>) -> Result<()> {
        let phase = self.phase;
        let name = phase.name(self.cfg.mode);
        let corpus = self.corpus;
        let path = self.metrics_path();
        if phase.trains_g() {
            let (report, nll) = evaluate_generator(&self.models, &corpus.val, &corpus.features, &self.cfg)?;
            let mut rec = MetricsRecord::new(name, self.step, "val", "g", &report, self.cfg.tie_policy);
            rec.mean_loss = Some(nll);
            rec.train_loss = losses.and_then(|l| l.g);
            rec.perceptual_loss = losses.and_then(|l| l.perceptual);
            append_metrics(&path, &rec)?;
            if report.mrr > self.best_g {
                self.best_g = report.mrr;
                write_checkpoint(&self.run_dir.join("g_best.ckpt"), &self.models.g_store.named("g"))?;
            }
        }
        if phase.trains_d(self.cfg.mode) || phase == Phase::Adapt {
            let (report, loss) = evaluate_discriminator(&self.models, &corpus.val, &corpus.features, &self.cfg)?;
            let mut rec = MetricsRecord::new(name, self.step, "val", "d", &report, self.cfg.tie_policy);
            rec.mean_loss = Some(loss);
            rec.train_loss = losses.and_then(|l| l.d);
            append_metrics(&path, &rec)?;
            if phase.trains_d(self.cfg.mode) && report.mrr > self.best_d {
                self.best_d = report.mrr;
                write_checkpoint(&self.run_dir.join("d_best.ckpt"), &self.models.d_store.named("d"))?;
            }
        }
        Ok(())
    }
}
