//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so that gradients that are zero
/// analytically are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_err: f64,
    /// Element with the largest error.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Set when a perturbed evaluation produced NaN or infinity.
    pub non_finite: Option<usize>,
}

impl ParamReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_err < tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed(self.tol))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the reverse-mode gradient of `f` with `(f(p+h) - f(p-h)) / 2h`
/// for every element of every parameter.
///
/// `f` receives a fresh graph with `params` registered as leaves (in order)
/// and must return a scalar node. It has to be deterministic.
pub fn finite_diff_check<F>(params: &[Tensor<f64>], f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("params require grad")).collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut reports = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        let mut report = ParamReport {
            index: pi,
            max_rel_err: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            non_finite: None,
        };
        for e in 0..work[pi].numel() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.get_or_insert(e);
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_element = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { tol, params: reports })
}
