//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that near-zero gradients are
/// compared absolutely instead of amplifying rounding noise.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(parameter, element)` with the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub elements_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Builds `f` on a fresh graph with every tensor of `params` as a leaf and
/// returns the scalar value and, when requested, its gradients.
fn evaluate<F>(f: &F, params: &[Tensor], want_grad: bool) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let out = f(&mut g, &leaves)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    let value = value.item();
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(out)?;
    let per_param = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    Ok((value, per_param))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// the given `step`, element by element.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate(&f, params, true)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        elements_checked: 0,
        tolerance,
        passed: true,
    };
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let original = params[p].data()[e];
            work[p].data_mut()[e] = original + step;
            let (plus, _) = evaluate(&f, &work, false)?;
            work[p].data_mut()[e] = original - step;
            let (minus, _) = evaluate(&f, &work, false)?;
            work[p].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[e];
            let rel = relative_error(a, numeric);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            report.max_absolute_error = report.max_absolute_error.max((a - numeric).abs());
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((p, e));
            }
            report.elements_checked += 1;
        }
    }
    report.passed = report.max_relative_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let params = vec![Tensor::vector(vec![0.5, -1.5, 2.0]), Tensor::scalar(0.7)];
        let report = grad_check(
            |g, p| {
                let a = g.mul(p[0], p[0])?;
                let b = g.mul(p[1], p[1])?;
                let sa = g.sum(a);
                let sb = g.sum(b);
                g.add(sa, sb)
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.elements_checked, 4);
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let params = vec![Tensor::vector(vec![0.3, 1.1, -0.4])];
        let report = grad_check(
            |g, p| {
                // derivative of sin deliberately off by 0.1
                let y = g.map(p[0], f64::sin, |x, _| x.cos() + 0.1);
                Ok(g.sum(y))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_relative_error > 1e-2);
    }

    #[test]
    fn correct_custom_rule_passes() {
        let params = vec![Tensor::vector(vec![0.3, 1.1, -0.4])];
        let report = grad_check(
            |g, p| {
                let y = g.map(p[0], f64::sin, |x, _| x.cos());
                Ok(g.sum(y))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
