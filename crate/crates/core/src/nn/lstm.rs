use rand::Rng;

use super::init::{init_uniform, INIT_SCALE};
use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};

/// Single-layer LSTM. Gate rows are stacked as (input, forget, candidate, output).
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    input: usize,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone)]
pub struct LstmRun {
    /// Hidden state after each step, `hidden x batch`.
    pub outputs: Vec<Var>,
    pub last: LstmState,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let w_ih = store.add(&format!("{name}.w_ih"), init_uniform(&[4 * hidden, input], INIT_SCALE, rng))?;
        let w_hh = store.add(&format!("{name}.w_hh"), init_uniform(&[4 * hidden, hidden], INIT_SCALE, rng))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[4 * hidden]))?;
        Ok(Lstm { w_ih, w_hh, bias, input, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        let h = tape.constant(Tensor::zeros(&[self.hidden, batch]));
        let c = tape.constant(Tensor::zeros(&[self.hidden, batch]));
        LstmState { h, c }
    }

    /// One step on a batch of column inputs `x` (`input x B`).
    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, state: LstmState) -> Result<LstmState> {
        let (xr, b) = tape.value(x).dims2();
        let (hr, hb) = tape.value(state.h).dims2();
        if xr != self.input || hr != self.hidden || hb != b || tape.value(state.c).dims2() != (hr, hb) {
            return shape_err(format!(
                "lstm step: input {:?}, h {:?}, expected {} / {}",
                tape.value(x).shape(),
                tape.value(state.h).shape(),
                self.input,
                self.hidden
            ));
        }
        let h = self.hidden;
        let gx = tape.matmul(p[self.w_ih], x)?;
        let gh = tape.matmul(p[self.w_hh], state.h)?;
        let gates = tape.add(gx, gh)?;
        let gates = tape.add(gates, p[self.bias])?;
        let i = tape.slice(gates, 0, 0, h)?;
        let f = tape.slice(gates, 0, h, h)?;
        let g = tape.slice(gates, 0, 2 * h, h)?;
        let o = tape.slice(gates, 0, 3 * h, h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Runs token sequences batched as columns. A sequence that ends early
    /// keeps its state frozen for the remaining steps, so `last` holds each
    /// sequence's state after its own final token.
    pub fn run_tokens(&self, tape: &mut Tape, p: &Bound, table: Var, seqs: &[&[usize]], init: Option<LstmState>) -> Result<LstmRun> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return contract_err("lstm input sequences must be non-empty");
        }
        let steps = seqs.iter().map(|s| s.len()).max().unwrap();
        let mut xs = Vec::with_capacity(steps);
        for j in 0..steps {
            let toks: Vec<usize> = seqs.iter().map(|s| s.get(j).copied().unwrap_or(0)).collect();
            xs.push(tape.embedding(table, &toks)?);
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.run_inputs(tape, p, &xs, &lengths, init)
    }

    /// Runs precomputed `input x B` step inputs; column `i` is live for the
    /// first `lengths[i]` steps and frozen afterwards.
    pub fn run_inputs(&self, tape: &mut Tape, p: &Bound, xs: &[Var], lengths: &[usize], init: Option<LstmState>) -> Result<LstmRun> {
        if lengths.is_empty() || lengths.iter().any(|&l| l == 0 || l > xs.len()) {
            return contract_err("lstm input sequences must be non-empty");
        }
        let batch = lengths.len();
        let mut state = match init {
            Some(s) => s,
            None => self.zero_state(tape, batch),
        };
        let mut outputs = Vec::with_capacity(xs.len());
        for (j, &x) in xs.iter().enumerate() {
            let next = self.step(tape, p, x, state)?;
            if lengths.iter().all(|&l| j < l) {
                state = next;
            } else {
                let mask: Vec<bool> = (0..self.hidden).flat_map(|_| lengths.iter().map(move |&l| j < l)).collect();
                let h = tape.select(&mask, next.h, state.h)?;
                let c = tape.select(&mask, next.c, state.c)?;
                state = LstmState { h, c };
            }
            outputs.push(state.h);
        }
        Ok(LstmRun { outputs, last: state })
    }

    /// Encodes one sequence: the `hidden x T` matrix of per-step states and
    /// the final state (`hidden x 1`).
    pub fn encode(&self, tape: &mut Tape, p: &Bound, table: Var, tokens: &[usize]) -> Result<(Var, Var)> {
        let run = self.run_tokens(tape, p, table, &[tokens], None)?;
        let all = tape.concat(&run.outputs, 1)?;
        Ok((all, run.last.h))
    }
}
