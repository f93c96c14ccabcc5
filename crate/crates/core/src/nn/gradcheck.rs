//! Central finite-difference gradient checking.

use super::Parameters;

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(slice, index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Relative error with a small floor so near-zero gradients are compared
/// absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter of `model`.
pub fn check_gradients<M, F>(model: &mut M, analytic: &[&[f64]], loss: F, h: f64) -> GradCheck
where
    M: Parameters,
    F: Fn(&M) -> f64,
{
    let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    assert_eq!(sizes.len(), analytic.len(), "gradient layout does not match parameters");
    let mut report = GradCheck::default();
    for (s, &len) in sizes.iter().enumerate() {
        assert_eq!(len, analytic[s].len(), "gradient slice {s} has the wrong length");
        for i in 0..len {
            let orig = model.param_slices()[s][i];
            model.param_slices_mut()[s][i] = orig + h;
            let up = loss(model);
            model.param_slices_mut()[s][i] = orig - h;
            let down = loss(model);
            model.param_slices_mut()[s][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[s][i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((s, i, a, numeric));
            }
        }
    }
    report
}
