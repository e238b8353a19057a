//! Central finite-difference verification of reverse-mode gradients.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely rather
/// than relatively; keeps round-off in `(f(θ+h) − f(θ−h)) / 2h` from
/// dominating entries that are zero up to noise.
pub const DENOMINATOR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// max over entries of |analytic − numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat element index) of the worst relative error
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn evaluate<F>(params: &[Tensor<f64>], detached: &[Rc<Tensor<f64>>], f: &F) -> Result<f64>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::replaying(detached.to_vec());
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Dimension(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Numeric(format!("function value is not finite: {x}")));
    }
    Ok(x)
}

/// Compare reverse-mode gradients of the scalar `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every entry of every tensor in
/// `params`.
///
/// Values cut by `detach` are held at their unperturbed values, so the check
/// verifies the gradient the engine defines for stop-gradient inputs.
pub fn gradcheck<F>(params: &[Tensor<f64>], h: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&g, &vars)?;
    if !g.item(out).is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let detached = g.detached_values();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = evaluate(&work, &detached, &f)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = evaluate(&work, &detached, &f)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, i);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
