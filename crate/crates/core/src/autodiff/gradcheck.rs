//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1e-8, |analytic| + |numeric|);
    /// infinite when either estimate produced a NaN
    pub max_rel_error: f64,
    pub entries: usize,
    /// (input, entry, analytic, numeric) at the worst entry
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.is_nan() || numeric.is_nan() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` against central differences with the
/// given `step`, perturbing every entry of every input.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic_ok = tape.backward(out).is_ok();

    let mut worst: f64 = 0.0;
    let mut at = None;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) if analytic_ok => g.to_vec(),
            _ => vec![f64::NAN; inputs[ti].numel()],
        };
        for k in 0..inputs[ti].numel() {
            let orig = inputs[ti].values()[k];
            probe[ti].values_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe[ti].values_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe[ti].values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[k], numeric);
            if at.is_none() || !(err <= worst) {
                worst = err;
                at = Some((ti, k, analytic[k], numeric));
            }
            entries += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, entries, worst: at })
}
