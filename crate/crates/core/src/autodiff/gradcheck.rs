//! Central finite-difference gradient checking.

use super::{AutodiffError, Graph, Result, Var};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so entries whose true gradient
/// is zero are judged by absolute error at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude seen for this parameter.
    pub max_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.value(root).item().ok_or_else(|| AutodiffError::NonScalarRoot {
        shape: g.value(root).shape().to_vec(),
    })
}

/// Compares the analytic gradient of `f` at `params` against central
/// differences with the given step.
///
/// `f` receives a fresh graph and one parameter handle per input tensor,
/// and must return a scalar node.
pub fn gradcheck<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;

    let mut checks = Vec::with_capacity(params.len());
    let mut shifted = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(&params[pi]));
        let mut check = ParamCheck {
            index: pi,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: analytic.max_abs(),
        };
        for i in 0..params[pi].numel() {
            let base = params[pi].data()[i];
            shifted[pi].data_mut()[i] = base + step;
            let plus = evaluate(&f, &shifted)?;
            shifted[pi].data_mut()[i] = base - step;
            let minus = evaluate(&f, &shifted)?;
            shifted[pi].data_mut()[i] = base;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
        }
        checks.push(check);
    }
    let passed = checks.iter().all(|c| c.max_rel_err <= tol);
    Ok(GradCheckReport {
        params: checks,
        tol,
        passed,
    })
}
