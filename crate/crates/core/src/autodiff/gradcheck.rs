use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input, flat index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbations changed a discrete choice of the
    /// forward pass (see [`Graph::decisions`]); they are not compared.
    pub skipped: usize,
    /// Set when the function was non-finite at some perturbed point.
    pub non_finite: bool,
    pub pass: bool,
}

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Check the gradient of a scalar function of one array.
pub fn finite_difference_check<Fun>(f: Fun, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&Graph, Var) -> Result<Var>,
{
    check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps, tol)
}

/// Largest share of coordinates that may straddle a non-smooth point
/// before a check fails.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

/// Check the gradient of a scalar function with respect to every
/// coordinate of every input.
///
/// A coordinate whose `±eps` evaluations take a different discrete branch
/// than the unperturbed point is skipped, since central differences are
/// meaningless across a kink.
pub fn check_many<Fun>(f: Fun, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok((g.value(out).item()?, g.decisions()))
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&g, &vars)?;
    g.backward(root)?;
    let base = g.decisions();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        non_finite: false,
        pass: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + eps;
            let (plus, dp) = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let (minus, dm) = eval(&work)?;
            work[which].data_mut()[i] = orig;
            report.checked += 1;
            if dp != base || dm != base {
                report.skipped += 1;
                continue;
            }
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite = true;
                report.pass = false;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[which].data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((which, i));
            }
        }
    }
    report.pass &= report.max_rel_error <= tol
        && report.skipped as f64 <= MAX_SKIPPED_FRACTION * report.checked as f64;
    Ok(report)
}
