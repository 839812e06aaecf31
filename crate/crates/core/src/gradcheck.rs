//! Finite-difference gradient checking.

use crate::error::{contract_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively.
pub const DEFAULT_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    /// `max |a − n| / max(|a|, |n|, floor)` over every input element.
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients with the fourth-order central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
///
/// `eval(inputs, want_grads)` returns the scalar loss and, when asked, one
/// gradient tensor per input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, floor: f64, mut eval: F) -> Result<GradReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, analytic) = eval(inputs, true)?;
    if analytic.len() != inputs.len() {
        return contract_err(format!("{} gradients for {} inputs", analytic.len(), inputs.len()));
    }
    let mut report = GradReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return contract_err(format!("gradient {i} has shape {:?}, input {:?}", grad.shape(), inputs[i].shape()));
        }
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x0 + offset;
                Ok(eval(&probe, false)?.0)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            probe[i].data_mut()[j] = x0;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error || !rel.is_finite() {
                report = GradReport { max_rel_error: rel, worst: (i, j), analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

/// [`check_gradients`] for a loss built directly from leaf inputs.
pub fn check_graph_fn<F>(inputs: &[Tensor<f64>], eps: f64, floor: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients(inputs, eps, floor, |xs, want| {
        let mut g = if want { Graph::new() } else { Graph::inference() };
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        if !want {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars.iter().zip(xs).map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| x.map(|_| 0.0))).collect();
        Ok((value, grads))
    })
}
