//! Finite-difference gradient verification.

use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;

/// Comparison result for one parameter tensor.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Element index of the worst relative error.
    pub worst: (usize, usize),
}

/// Compare analytic gradients against central differences of `f`.
///
/// `f` must recompute the same scalar loss from the store's current values.
/// At most `max_elements` entries per parameter are probed, spread evenly
/// (0 means all). Relative error is `|a - n| / max(|a| + |n|, floor)`.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    eps: f64,
    max_elements: usize,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<FdReport> {
    const REL_FLOOR: f64 = 1e-7;
    let mut reports = Vec::with_capacity(ids.len());
    for &id in ids {
        let name = store.name(id).to_string();
        let (rows, cols) = store.value(id).dim();
        let total = rows * cols;
        let stride = if max_elements == 0 || max_elements >= total {
            1
        } else {
            total.div_ceil(max_elements)
        };
        let zero = ndarray::Array2::zeros((rows, cols));
        let grad = analytic.get(id).unwrap_or(&zero);

        let mut report = FdReport {
            name,
            checked: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst: (0, 0),
        };
        let mut lin = 0;
        while lin < total {
            let (r, c) = (lin / cols, lin % cols);
            let orig = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = orig + eps;
            let up = f(store);
            store.value_mut(id)[[r, c]] = orig - eps;
            let down = f(store);
            store.value_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad[[r, c]];
            let abs_err = (a - numeric).abs();
            let rel_err = abs_err / (a.abs() + numeric.abs()).max(REL_FLOOR);
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = (r, c);
            }
            report.max_abs_err = report.max_abs_err.max(abs_err);
            report.checked += 1;
            lin += stride;
        }
        reports.push(report);
    }
    reports
}
