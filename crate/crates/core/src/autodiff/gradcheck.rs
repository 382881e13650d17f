//! Central finite-difference oracle for checking analytic gradients.
//!
//! The numeric side only ever calls the forward closure, so it is independent
//! of the tape's backward rules.

use super::{ParamGrads, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares `grad_fn` against `(loss(θ+h) − loss(θ−h)) / 2h` for every entry of
/// every trainable parameter.
pub fn check_gradients(
    store: &mut ParamStore,
    h: f64,
    loss: impl Fn(&ParamStore) -> f64,
    grad_fn: impl Fn(&ParamStore) -> ParamGrads,
) -> GradCheckReport {
    check_gradients_limited(store, h, usize::MAX, loss, grad_fn)
}

/// Like [`check_gradients`] but probes at most `per_param` evenly spaced
/// entries of each parameter.
pub fn check_gradients_limited(
    store: &mut ParamStore,
    h: f64,
    per_param: usize,
    loss: impl Fn(&ParamStore) -> f64,
    grad_fn: impl Fn(&ParamStore) -> ParamGrads,
) -> GradCheckReport {
    let grads = grad_fn(store);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let len = store.get(id).value.len();
        let stride = (len / per_param.max(1)).max(1);
        for i in (0..len).step_by(stride).take(per_param) {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + h;
            let up = loss(store);
            store.get_mut(id).value.data_mut()[i] = original - h;
            let down = loss(store);
            store.get_mut(id).value.data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    report
}
