//! History-conditioned image-attentive encoder.
//!
//! The question attends over history rounds, then question and attended
//! history jointly attend over image regions; the three summaries are fused
//! through `tanh(W_e [m_q; m_h; v])`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::nn::{init_uniform, Attention, Bound, Lstm, ParamId, ParamStore, INIT_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub emb: usize,
    pub d: usize,
    pub d_img: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderInput<'a> {
    /// `d_img x k` region features.
    pub image: &'a Tensor,
    /// Caption first, then one `q ‖ a` sequence per earlier round.
    pub history: &'a [Vec<usize>],
    pub question: &'a [usize],
}

#[derive(Debug, Clone, Copy)]
pub struct DialogEncoding {
    /// `d x 1`.
    pub e_t: Var,
    /// `1 x t` attention over history rounds.
    pub alpha_h: Var,
    /// `1 x k` attention over image regions.
    pub alpha_v: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    pub embed: ParamId,
    pub question_lstm: Lstm,
    pub history_lstm: Lstm,
    pub w_img: ParamId,
    pub history_att: Attention,
    pub image_att: Attention,
    pub w_e: ParamId,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let EncoderConfig { vocab, emb, d, d_img } = cfg;
        let embed = store.add(&format!("{name}.embed"), init_uniform(&[emb, vocab], INIT_SCALE, rng))?;
        let question_lstm = Lstm::new(store, &format!("{name}.q_lstm"), emb, d, rng)?;
        let history_lstm = Lstm::new(store, &format!("{name}.h_lstm"), emb, d, rng)?;
        let w_img = store.add(&format!("{name}.w_img"), init_uniform(&[d, d_img], INIT_SCALE, rng))?;
        let history_att = Attention::new(store, &format!("{name}.att_h"), d, d, d, rng)?;
        let image_att = Attention::new(store, &format!("{name}.att_v"), d, 2 * d, d, rng)?;
        let w_e = store.add(&format!("{name}.w_e"), init_uniform(&[d, 3 * d], INIT_SCALE, rng))?;
        Ok(Encoder { cfg, embed, question_lstm, history_lstm, w_img, history_att, image_att, w_e })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    pub fn encode_round(&self, tape: &mut Tape, p: &Bound, input: &EncoderInput) -> Result<DialogEncoding> {
        let (_, mut out) = self.encode_many(tape, p, std::slice::from_ref(input))?;
        Ok(out.pop().expect("one input"))
    }

    /// Element `i` is `encode_round(inputs[i])`.
    pub fn encode_batch(&self, tape: &mut Tape, p: &Bound, inputs: &[EncoderInput]) -> Result<Vec<DialogEncoding>> {
        Ok(self.encode_many(tape, p, inputs)?.1)
    }

    /// Batched encoding; also returns the `d x B` matrix whose columns are
    /// the per-input `e_t`. Results match per-input calls bitwise.
    pub fn encode_many(&self, tape: &mut Tape, p: &Bound, inputs: &[EncoderInput]) -> Result<(Var, Vec<DialogEncoding>)> {
        if inputs.is_empty() {
            return contract_err("empty encoder batch");
        }
        let mut h_spans = Vec::with_capacity(inputs.len());
        let mut v_spans = Vec::with_capacity(inputs.len());
        let (mut t_total, mut k_total) = (0, 0);
        for input in inputs {
            if input.history.is_empty() {
                return contract_err("history must contain at least the caption");
            }
            let (di, k) = input.image.dims2();
            if di != self.cfg.d_img || k == 0 || input.image.rank() != 2 {
                return shape_err(format!("image features {:?}, expected {} rows", input.image.shape(), self.cfg.d_img));
            }
            h_spans.push((t_total, input.history.len()));
            v_spans.push((k_total, k));
            t_total += input.history.len();
            k_total += k;
        }
        let table = p[self.embed];
        let questions: Vec<&[usize]> = inputs.iter().map(|x| x.question).collect();
        let m_q = self.question_lstm.run_tokens(tape, p, table, &questions, None)?.last.h;
        let rounds: Vec<&[usize]> = inputs.iter().flat_map(|x| x.history.iter().map(Vec::as_slice)).collect();
        let h = self.history_lstm.run_tokens(tape, p, table, &rounds, None)?;
        let hist = self.history_att.attend_many(tape, p, h.last.h, &h_spans, m_q)?;
        let hist_all = join(tape, hist.iter().map(|a| a.attended))?;

        let images: Vec<Var> = inputs.iter().map(|x| tape.constant(x.image.clone())).collect();
        let image = join(tape, images.into_iter())?;
        let regions = tape.matmul(p[self.w_img], image)?;
        let query = tape.concat(&[m_q, hist_all], 0)?;
        let img = self.image_att.attend_many(tape, p, regions, &v_spans, query)?;
        let img_all = join(tape, img.iter().map(|a| a.attended))?;

        let fused = tape.concat(&[m_q, hist_all, img_all], 0)?;
        let pre = tape.matmul(p[self.w_e], fused)?;
        let e = tape.tanh(pre);
        let mut out = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let e_t = if inputs.len() == 1 { e } else { tape.slice(e, 1, i, 1)? };
            out.push(DialogEncoding { e_t, alpha_h: hist[i].weights, alpha_v: img[i].weights });
        }
        Ok((e, out))
    }
}

/// Column-wise concatenation that passes a single input through.
fn join(tape: &mut Tape, vars: impl Iterator<Item = Var>) -> Result<Var> {
    let vars: Vec<Var> = vars.collect();
    if vars.len() == 1 {
        Ok(vars[0])
    } else {
        tape.concat(&vars, 1)
    }
}
