//! Central finite-difference gradient verification.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / (||analytic|| + ||numeric||)` per input.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data().iter().sum())
}

/// Compares backward against central differences of `sum(f(inputs))`.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let out = if g.shape(out) == (1, 1) { out } else { g.sum(out) };
    let grads = g.backward(out);

    let mut report = GradCheckReport { rel_errors: Vec::new(), analytic: Vec::new(), numeric: Vec::new() };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let (r, c) = inputs[k].shape();
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(r, c));
        let mut numeric = Tensor::zeros(r, c);
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + step;
            let fp = eval(&f, &work)?;
            work[k].data_mut()[i] = x0 - step;
            let fm = eval(&f, &work)?;
            work[k].data_mut()[i] = x0;
            numeric.data_mut()[i] = (fp - fm) / (2.0 * step);
        }
        let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na + nn;
        report.rel_errors.push(if denom == 0.0 { 0.0 } else { diff / denom });
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
