//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Probes dropped because a tie or kink fell inside the stencil.
    pub skipped: usize,
}

/// Relative error used by every gradient check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the gradient of the scalar `f(inputs)` against central differences.
///
/// `f` must rebuild its computation on the supplied graph each time it is
/// called. At most `max_elements` elements per input are probed, spread
/// evenly; `None` checks every element.
pub fn finite_difference_check<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_elements: Option<usize>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(inputs, h, max_elements, None, f)
}

/// [`finite_difference_check`] for functions with max reductions, ReLU or
/// absolute values.
///
/// A probe whose error exceeds `tol / 4` is repeated with step `h / 2`. If
/// the two numeric estimates disagree by more than `tol / 8` the function is not
/// smooth within the stencil; the probe is counted in `skipped` instead of
/// the error. A wrong analytic gradient gives a stable numeric estimate and
/// is still reported.
pub fn finite_difference_check_away_from_ties<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_elements: Option<usize>,
    tol: f64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(inputs, h, max_elements, Some(tol), f)
}

fn check<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_elements: Option<usize>,
    tie_tol: Option<f64>,
    f: F,
) -> Result<GradReport>
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
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(g);

    let mut report = GradReport { max_rel_error: 0.0, worst: (0, 0), checked: 0, skipped: 0 };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let step = match max_elements {
            Some(0) => return Err(Error::Usage("max_elements must be positive".into())),
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(step) {
            let orig = t.data()[e];
            let mut central = |h: f64| -> Result<f64> {
                probe[ti].data_mut()[e] = orig + h;
                let plus = eval(&probe)?;
                probe[ti].data_mut()[e] = orig - h;
                let minus = eval(&probe)?;
                probe[ti].data_mut()[e] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let a = analytic[ti].data()[e];
            let numeric = central(h)?;
            let err = relative_error(a, numeric);
            if let Some(tol) = tie_tol {
                if err > tol / 4.0 && relative_error(numeric, central(h / 2.0)?) > tol / 8.0 {
                    report.skipped += 1;
                    continue;
                }
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
