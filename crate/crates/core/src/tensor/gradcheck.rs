use rand::Rng;

use super::Parameters;

/// Relative errors below this magnitude of both gradients are measured
/// against the floor instead, so exact zeros do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

/// Differences within this many ulps of the loss, divided by `2h`, are
/// indistinguishable from rounding in the central difference.
const ROUNDOFF_ULPS: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter with the largest relative error.
    pub worst: Option<String>,
    pub failures: Vec<GradFailure>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic` against central differences of `loss` at `params`,
/// one scalar parameter at a time.
pub fn finite_diff_check<P, F>(loss: F, params: &P, analytic: &P, h: f64, tol: f64) -> GradCheckReport
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let coords: Vec<(usize, usize)> = params
        .slices()
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.len()).map(move |i| (si, i)))
        .collect();
    finite_diff_check_at(loss, params, analytic, h, tol, &coords)
}

/// Up to `per_tensor` distinct coordinates `(tensor, index)` from every
/// parameter tensor, for models too large to check exhaustively.
pub fn sample_coordinates<P: Parameters, R: Rng + ?Sized>(params: &P, per_tensor: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (si, s) in params.slices().iter().enumerate() {
        let mut idx = rand::seq::index::sample(rng, s.len(), per_tensor.min(s.len())).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| (si, i)));
    }
    out
}

/// As [`finite_diff_check`], restricted to the given coordinates.
pub fn finite_diff_check_at<P, F>(
    loss: F,
    params: &P,
    analytic: &P,
    h: f64,
    tol: f64,
    coords: &[(usize, usize)],
) -> GradCheckReport
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let names = params.names();
    let analytic = analytic.slices().into_iter().map(<[f64]>::to_vec).collect::<Vec<_>>();
    let roundoff = ROUNDOFF_ULPS * f64::EPSILON * loss(params).abs().max(1.0) / (2.0 * h);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        tolerance: tol,
    };
    for &(si, idx) in coords {
        let original = probe.slices()[si][idx];
        probe.slices_mut()[si][idx] = original + h;
        let plus = loss(&probe);
        probe.slices_mut()[si][idx] = original - h;
        let minus = loss(&probe);
        probe.slices_mut()[si][idx] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[si][idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        let path = format!("{}[{idx}]", names[si]);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some(path.clone());
        }
        if !(rel <= tol || (a - numeric).abs() <= roundoff) {
            report.failures.push(GradFailure {
                path,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    report
}
