/// Relative discrepancy used throughout the gradient checks:
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Worst coordinate found by [`gradient_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradientReport {
    pub worst: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against central differences of `f` around `x` and
/// returns the worst relative error over all coordinates.
pub fn gradient_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    gradient_report(f, x, analytic, h).worst
}

pub fn gradient_report<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> GradientReport
where
    F: FnMut(&[f64]) -> f64,
{
    report_with(f, x, analytic, h, false)
}

/// Like [`gradient_check`] with the fourth-order five-point stencil, for
/// functions whose curvature makes plain central differences too coarse.
pub fn gradient_check_five_point<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    report_with(f, x, analytic, h, true).worst
}

fn report_with<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64, five_point: bool) -> GradientReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut report = GradientReport::default();
    let mut at = |probe: &mut Vec<f64>, i: usize, orig: f64, d: f64| {
        probe[i] = orig + d;
        let v = f(probe);
        probe[i] = orig;
        v
    };
    for i in 0..x.len() {
        let orig = probe[i];
        let numeric = if five_point {
            let (p1, m1) = (at(&mut probe, i, orig, h), at(&mut probe, i, orig, -h));
            let (p2, m2) = (at(&mut probe, i, orig, 2.0 * h), at(&mut probe, i, orig, -2.0 * h));
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        } else {
            (at(&mut probe, i, orig, h) - at(&mut probe, i, orig, -h)) / (2.0 * h)
        };
        let err = relative_error(analytic[i], numeric);
        if err > report.worst {
            report = GradientReport { worst: err, index: i, analytic: analytic[i], numeric };
        }
    }
    report
}
