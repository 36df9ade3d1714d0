//! Finite-difference verification of tape gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Compare an analytic gradient against central finite differences of a
/// scalar evaluation, returning max over elements of
/// |analytic - central| / max(1, |central|).
///
/// Elements are perturbed independently, so the evaluations run in
/// parallel; results are collected in index order and stay deterministic.
pub fn max_rel_error_vs_fd<F>(
    eval: F,
    x0: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<f64> + Sync,
{
    if analytic.shape() != x0.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} does not match input {:?}",
            analytic.shape(),
            x0.shape()
        )));
    }
    let base = x0.data();
    let errs: Vec<f64> = (0..x0.numel())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut plus = base.to_vec();
            plus[i] += eps;
            let mut minus = base.to_vec();
            minus[i] -= eps;
            let fp = eval(&Tensor::from_vec(x0.shape().to_vec(), plus)?)?;
            let fm = eval(&Tensor::from_vec(x0.shape().to_vec(), minus)?)?;
            let central = (fp - fm) / (2.0 * eps);
            Ok((analytic.data()[i] - central).abs() / central.abs().max(1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Gradient check of a scalar-valued tape function at `x`.
///
/// Runs `f` once under a fresh tape to obtain the analytic gradient, then
/// sweeps every element of `x` with central differences of step `eps`
/// (1e-5 is the standard choice in wide-float mode).
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let out = f(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::usage(format!(
            "gradcheck requires a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .ok_or_else(|| Error::usage("gradcheck input was not tracked"))?;
    max_rel_error_vs_fd(
        |xt| {
            let mut t = Tape::new();
            let v = t.leaf(xt);
            let out = f(&mut t, v)?;
            Ok(t.scalar_value(out))
        },
        x,
        &analytic,
        eps,
    )
}
