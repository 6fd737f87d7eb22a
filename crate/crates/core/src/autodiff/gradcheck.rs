//! Central finite differences: the oracle for every backward rule.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid("finite_diff_grad", format!("eps must be positive, got {eps}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let y = f(t)?;
        if y.numel() != 1 {
            return Err(Error::invalid(
                "finite_diff_grad",
                format!("f returned shape {:?}, expected a scalar", y.shape()),
            ));
        }
        let v = y.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        Ok(v)
    };
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Worst input of `max_i |analytic_i − numeric_i| / max(max_i |numeric_i|, 1e-8)`.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Compares [`Tape::backward`] against [`finite_diff_grad`] for every input.
///
/// `build` must produce a scalar from leaves bound to `inputs`. Errors are
/// normalized by the largest numeric gradient magnitude of each input, so an
/// input whose gradient is tiny everywhere is not judged by noise.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[idx])?.clone();
        let numeric = finite_diff_grad(
            |x| {
                let t = Tape::new();
                let vs: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == idx { x.clone() } else { v.clone() }))
                    .collect();
                Ok((*build(&t, &vs)?.value()).clone())
            },
            input,
            eps,
        )?;
        let scale = numeric.max_abs().max(1e-8);
        per_input.push(analytic.max_abs_diff(&numeric)? / scale);
    }
    Ok(GradCheckReport {
        max_rel_err: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
    })
}
