use rand::Rng;

use super::init::{init_uniform, INIT_SCALE};
use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, shape_err, Result};

/// Additive attention: `z = w_a^T tanh(W_m M + (W_q q) 1^T)`, weights =
/// softmax(z), attended = M weights^T.
///
/// `w_a` is stored as a `1 x a` row.
#[derive(Debug, Clone)]
pub struct Attention {
    pub w_m: ParamId,
    pub w_q: ParamId,
    pub w_a: ParamId,
    memory_dim: usize,
    query_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `1 x n` attention distribution over memory columns.
    pub weights: Var,
    /// `d x 1` convex combination of memory columns.
    pub attended: Var,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, memory_dim: usize, query_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let w_m = store.add(&format!("{name}.w_m"), init_uniform(&[hidden, memory_dim], INIT_SCALE, rng))?;
        let w_q = store.add(&format!("{name}.w_q"), init_uniform(&[hidden, query_dim], INIT_SCALE, rng))?;
        let w_a = store.add(&format!("{name}.w_a"), init_uniform(&[1, hidden], INIT_SCALE, rng))?;
        Ok(Attention { w_m, w_q, w_a, memory_dim, query_dim })
    }

    pub fn attend(&self, tape: &mut Tape, p: &Bound, memory: Var, query: Var) -> Result<Attended> {
        let n = tape.value(memory).dims2().1;
        let mut out = self.attend_many(tape, p, memory, &[(0, n)], query)?;
        Ok(out.pop().expect("one span"))
    }

    /// Independent attentions sharing projections: query column `i` attends
    /// over the columns `spans[i] = (start, len)` of `memory`.
    pub fn attend_many(&self, tape: &mut Tape, p: &Bound, memory: Var, spans: &[(usize, usize)], queries: Var) -> Result<Vec<Attended>> {
        let (d, n) = tape.value(memory).dims2();
        if spans.is_empty() || spans.iter().any(|&(s, l)| l == 0 || s + l > n) || tape.value(memory).rank() != 2 {
            return contract_err("attention over an empty memory");
        }
        let (qd, qc) = tape.value(queries).dims2();
        if d != self.memory_dim || qd != self.query_dim || qc != spans.len() {
            return shape_err(format!(
                "attend: memory {:?}, queries {:?}, expected {}/{} with {} columns",
                tape.value(memory).shape(),
                tape.value(queries).shape(),
                self.memory_dim,
                self.query_dim,
                spans.len()
            ));
        }
        let proj_m = tape.matmul(p[self.w_m], memory)?;
        let proj_q = tape.matmul(p[self.w_q], queries)?;
        let whole = spans.len() == 1 && spans[0] == (0, n);
        let mut out = Vec::with_capacity(spans.len());
        for (i, &(start, len)) in spans.iter().enumerate() {
            let (pm, mem) = if whole { (proj_m, memory) } else { (tape.slice(proj_m, 1, start, len)?, tape.slice(memory, 1, start, len)?) };
            let pq = if qc == 1 { proj_q } else { tape.slice(proj_q, 1, i, 1)? };
            let pre = tape.add(pm, pq)?;
            let act = tape.tanh(pre);
            let z = tape.matmul(p[self.w_a], act)?;
            let weights = tape.softmax(z, 1)?;
            let wt = tape.transpose(weights);
            let attended = tape.matmul(mem, wt)?;
            out.push(Attended { weights, attended });
        }
        Ok(out)
    }
}
