use std::borrow::Cow;

use super::{Graph, Tensor, Var};
use crate::error::{AmdError, Result};
use crate::scalar::Scalar;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport<F> {
    /// max |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_relative_error: F,
    pub worst_input: usize,
    pub worst_coordinate: usize,
    pub evaluations: usize,
}

fn scalar_output<F: Scalar>(g: &Graph<'_, F>, out: Var, context: &str, coordinate: usize) -> Result<F> {
    let t = g.value(out);
    if t.len() != 1 {
        return Err(AmdError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(AmdError::NonFinite {
            context: context.to_string(),
            coordinate,
        });
    }
    Ok(v)
}

/// Checks the gradients of a deterministic scalar function of `inputs`.
///
/// `f` receives one variable per input, in order. Every coordinate of every
/// input is perturbed by `±step`.
pub fn grad_check<F, Fun>(f: Fun, inputs: &[Tensor<F>], step: F) -> Result<GradCheckReport<F>>
where
    F: Scalar,
    Fun: for<'a> Fn(&mut Graph<'a, F>, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= F::zero() {
        return Err(AmdError::Contract("grad_check step must be positive".into()));
    }

    let analytic: Vec<Tensor<F>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        scalar_output(&g, out, "unperturbed output", 0)?;
        g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |work: &[Tensor<F>], input: usize, coordinate: usize| -> Result<F> {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|t| g.leaf(Cow::Borrowed(t), false)).collect();
        let out = f(&mut g, &vars)?;
        scalar_output(&g, out, &format!("input {input}"), coordinate)
    };

    let mut work = inputs.to_vec();
    let two_step = step + step;
    let mut report = GradCheckReport {
        max_relative_error: F::zero(),
        worst_input: 0,
        worst_coordinate: 0,
        evaluations: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work, i, j)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work, i, j)?;
            work[i].data_mut()[j] = orig;
            report.evaluations += 2;

            let numeric = (plus - minus) / two_step;
            let a = analytic[i].data()[j];
            let denom = F::one().max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_input = i;
                report.worst_coordinate = j;
            }
        }
    }
    Ok(report)
}
