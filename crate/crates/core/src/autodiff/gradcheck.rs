//! Central finite-difference checks of analytic gradients.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over every input element.
    pub max_rel_err: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor on the denominator so that tiny gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares the gradients of the scalar built by `f` against central
/// differences with step `h`. Every input is bound as a trainable leaf.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.scalar(out))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient").data().to_vec();
        for e in 0..inputs[ii].len() {
            let orig = inputs[ii].data()[e];
            work[ii].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[ii].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic[e], numeric);
            if err > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: err,
                    worst: (ii, e),
                    analytic: analytic[e],
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
