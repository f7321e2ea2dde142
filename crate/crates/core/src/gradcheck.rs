//! Central-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::param::{Bound, Params};
use crate::tape::{Tape, Var};

/// Outcome of a [`grad_check`] sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across every parameter entry.
    pub max_rel_err: f64,
    /// Largest absolute difference between the two estimates.
    pub max_abs_err: f64,
    /// Parameter name and flat entry index where the maximum occurred.
    pub worst: String,
    /// Number of scalar entries checked.
    pub entries: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` must rebuild the forward pass from scratch on the tape it is given;
/// it is called once for the analytic gradients and twice per parameter
/// entry for the numeric ones. The per-entry relative error is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)` and the report
/// carries the maximum over all entries.
pub fn grad_check<F>(params: &mut Params, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let eval = |params: &Params| -> Result<f64> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = f(&tape, &bound)?;
        let v = loss.value();
        if v.len() != 1 {
            return Err(Error::op("grad_check", format!("loss has shape {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check loss is {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = f(&tape, &bound)?;
        if loss.value().len() != 1 {
            return Err(Error::op("grad_check", format!("loss has shape {:?}", loss.shape())));
        }
        let grads = loss.backward()?;
        let mut out = Vec::with_capacity(params.len());
        for id in 0..params.len() {
            out.push(grads.wrt(bound.var(id)).data().to_vec());
        }
        out
    };

    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    let mut worst = String::from("(none)");
    let mut entries = 0usize;
    for id in 0..params.len() {
        for e in 0..params.get(id).value.len() {
            let old = params.get(id).value.data()[e];

            params.get_mut(id).value.data_mut()[e] = old + eps;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[e] = old - eps;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[e] = old;

            let numeric = (plus - minus) / (2.0 * eps);
            let an = analytic[id][e];
            let rel = (an - numeric).abs() / (an.abs() + numeric.abs() + 1e-12);
            max_abs_err = max_abs_err.max((an - numeric).abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = format!("{}[{}]", params.get(id).name, e);
            }
            entries += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, max_abs_err, worst, entries })
}
