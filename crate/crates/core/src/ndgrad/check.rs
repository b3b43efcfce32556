//! Central finite-difference gradient checking in 64-bit.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Largest discrepancy found by [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Floor of the relative-error denominator, so that entries whose true
/// gradient is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-2;

/// Compares the analytic gradient of `f` (which must return a scalar) with
/// central differences of step `h` for every element of every input.
///
/// Relative error per element is `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(&grads, v)).collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = k;
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces an arbitrary tensor to a scalar through fixed pseudo-random
/// weights, so every output element influences the checked gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let w = Tensor::from_fn(g.shape(x).to_vec(), |i| ((i * 7919 + 13) % 97) as f64 / 48.5 - 1.0 + 0.5 / n as f64);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}
