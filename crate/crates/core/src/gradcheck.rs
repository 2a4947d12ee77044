//! Central finite-difference oracle for tape gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum was attained.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks the gradient of the scalar `f` at `x` against central differences
/// with the given `step`, over every coordinate of `x`.
pub fn check_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_gradient_multi(|tape, vars| f(tape, vars[0]), core::slice::from_ref(x), step, None)?;
    Ok(report.max_rel_error)
}

/// Multi-input form of [`check_gradient`]. `coords`, when given, restricts
/// the numeric side to the listed `(input, flat index)` pairs.
pub fn check_gradient_multi<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar_value(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), coordinates: coords.len() };
    for &(k, i) in coords {
        let orig = work[k].data()[i];
        work[k].data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work[k].data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work[k].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[k].data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient error at input {k}, index {i}")));
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (k, i);
        }
    }
    Ok(report)
}
