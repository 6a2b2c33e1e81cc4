//! Central finite-difference verification of computed gradients.

use crate::autodiff::{Gradients, ParamStore, Tensor};

/// Result of checking one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor: entries where analytic and numeric gradients
/// are both below `abs_floor` are counted as exact (they sit below the
/// resolution of the difference quotient).
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Check every scalar of every parameter against central differences of
/// `loss_fn`. Returns per-parameter reports; the caller asserts on
/// `max_rel_err`.
pub fn check_all_params<F>(
    store: &ParamStore,
    grads: &Gradients,
    step: f64,
    abs_floor: f64,
    mut loss_fn: F,
) -> Vec<ParamCheck>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut reports = Vec::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.value(id).len();
        let zero = Tensor::zeros(store.value(id).raw_dim());
        let analytic = grads.get(id).unwrap_or(&zero);
        let mut max_rel = 0.0_f64;
        for i in 0..n {
            let orig = store.value(id).as_slice().unwrap()[i];
            probe.value_mut(id).as_slice_mut().unwrap()[i] = orig + step;
            let up = loss_fn(&probe);
            probe.value_mut(id).as_slice_mut().unwrap()[i] = orig - step;
            let down = loss_fn(&probe);
            probe.value_mut(id).as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[i];
            max_rel = max_rel.max(rel_err(a, numeric, abs_floor));
        }
        reports.push(ParamCheck {
            name: store.name(id).to_string(),
            checked: n,
            max_rel_err: max_rel,
        });
    }
    reports
}
