//! Central finite-difference oracle for tape gradients.
//!
//! Only forward values are used on the numeric side, so a wrong backward rule
//! cannot hide behind itself.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the element-wise relative error.
const FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradReport {
    fn merge(self, other: GradReport) -> GradReport {
        GradReport {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the tape gradient of `f` against central differences with respect
/// to every entry of every input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report = report.merge(GradReport {
                max_rel_err: rel_err(analytic[k][i], numeric),
                checked: 1,
            });
        }
    }
    Ok(report)
}

/// Same check against the trainable tensors of a parameter store. At most
/// `max_per_param` evenly spaced entries are probed per tensor.
pub fn check_params<F>(store: &ParamStore, h: f64, max_per_param: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.accumulate_into(&mut analytic)?;
    }

    let mut work = store.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for id in store.ids() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let n = store.get(id).numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = forward_value(&work, &f)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = forward_value(&work, &f)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).grad().map_or(0.0, |g| g[i]);
            report = report.merge(GradReport {
                max_rel_err: rel_err(a, numeric),
                checked: 1,
            });
        }
    }
    Ok(report)
}

fn forward_value<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    Ok(tape.value(loss).item())
}
