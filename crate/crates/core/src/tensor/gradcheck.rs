use super::Tensor;
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Set when `loss_fn` failed; `max_rel_error` is then infinite.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            worst: None,
            analytic: f64::NAN,
            numeric: f64::NAN,
            checked: 0,
            failure: Some(msg),
        }
    }
}

/// Compares analytic gradients against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, element by element.
///
/// `loss_fn` returns the loss value and one gradient tensor per parameter.
/// Relative error is `|g − ĝ| / max(|g|, |ĝ|, 1e-8)`. Never fails; errors from
/// `loss_fn` are reported through [`GradCheckReport::failure`].
pub fn grad_check<F>(mut loss_fn: F, params: &[Tensor], eps: f64) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let analytic = match loss_fn(params) {
        Ok((_, g)) => g,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(g, p)| g.len() != p.len()) {
        return GradCheckReport::failed("gradient list does not match parameters".into());
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        failure: None,
    };
    let mut probe = params.to_vec();
    for ti in 0..params.len() {
        for ei in 0..params[ti].len() {
            let orig = params[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let plus = loss_fn(&probe);
            probe[ti].data_mut()[ei] = orig - eps;
            let minus = loss_fn(&probe);
            probe[ti].data_mut()[ei] = orig;
            let (fp, fm) = match (plus, minus) {
                (Ok((a, _)), Ok((b, _))) => (a, b),
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(e.to_string()),
            };
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((ti, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
