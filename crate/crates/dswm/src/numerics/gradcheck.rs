//! Central finite-difference verification of analytic gradients.

/// Step size for central differences. With f64 values and desk-scale
/// functions this sits near the truncation/roundoff sweet spot.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare `analytic` against central differences of `f` at `point`.
///
/// Relative error per coordinate is |a − n| / max(|a|, |n|, 1), so
/// near-zero gradients are judged on absolute error.
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}
