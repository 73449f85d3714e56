use crate::error::Result;

use super::{ParamId, ParamSet, RngStream};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Entries whose perturbed evaluation was not finite.
    pub non_finite: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite == 0 && self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients stored in `params` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` on `sample_size` randomly chosen scalar entries.
///
/// `floor` bounds the denominator of the relative error so entries whose true gradient is
/// zero are judged on absolute error.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &mut ParamSet<f64>,
    step: f64,
    sample_size: usize,
    floor: f64,
    rng: &mut RngStream,
) -> GradCheckReport
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    let total = params.scalar_count();
    let mut report = GradCheckReport::default();
    if total == 0 {
        return report;
    }
    let offsets: Vec<usize> = params
        .entries()
        .iter()
        .scan(0, |acc, e| {
            let start = *acc;
            *acc += e.value.len();
            Some(start)
        })
        .collect();
    let mut picks: Vec<usize> = (0..total).collect();
    if sample_size < total {
        rng.shuffle(&mut picks);
        picks.truncate(sample_size);
        picks.sort_unstable();
    }
    for flat in picks {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let (id, idx) = (ParamId(p), flat - offsets[p]);
        let original = params.value(id).data()[idx];
        let analytic = params.grad(id).data()[idx];
        params.value_mut(id).data_mut()[idx] = original + step;
        let plus = f(params);
        params.value_mut(id).data_mut()[idx] = original - step;
        let minus = f(params);
        params.value_mut(id).data_mut()[idx] = original;
        report.checked += 1;
        let numeric = match (plus, minus) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a - b) / (2.0 * step),
            _ => {
                report.non_finite += 1;
                continue;
            }
        };
        let rel = relative_error(analytic, numeric, floor);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((params.entry(id).name.clone(), idx, analytic, numeric));
        }
    }
    report
}
