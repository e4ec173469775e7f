//! Central-difference verification of reverse-mode gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a-n| / max(|a|,|n|,1e-8)` over all checked coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub coordinates: usize,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, tape: &Tape, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::GradCheck(format!("function must be scalar-valued, got {:?}", out.shape())));
    }
    Ok(out.item())
}

/// Pins a closure to the signature [`finite_diff_check`] expects, so it can be
/// bound to a variable and reused.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Compares the tape gradient of the scalar function `f` with central
/// differences `(f(x+eps e_i) - f(x-eps e_i)) / 2eps` for every coordinate of
/// every input tensor.
///
/// A function whose two identical evaluations disagree is rejected as
/// non-deterministic.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().numel() != 1 {
        return Err(Error::GradCheck(format!("function must be scalar-valued, got {:?}", out.shape())));
    }
    let first = out.item();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let second = eval_scalar(&f, &Tape::inference(), inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::GradCheck(format!("non-deterministic function: {first} vs {second}")));
    }

    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: 0, worst: None };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ci in 0..inputs[ti].numel() {
            let x0 = inputs[ti].data()[ci];
            work[ti].data_mut()[ci] = x0 + eps;
            let plus = eval_scalar(&f, &Tape::inference(), &work)?;
            work[ti].data_mut()[ci] = x0 - eps;
            let minus = eval_scalar(&f, &Tape::inference(), &work)?;
            work[ti].data_mut()[ci] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ci];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, ci, a, numeric));
            }
        }
    }
    Ok(report)
}
