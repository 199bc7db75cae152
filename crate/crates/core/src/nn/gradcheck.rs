//! Central finite-difference gradient verification.

use super::params::{Gradients, ParamStore};

/// Central-difference gradients of `loss_fn` with respect to every
/// parameter in the store.
pub fn numeric_gradients(
    store: &mut ParamStore,
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
    h: f64,
) -> Gradients {
    let mut out = store.zero_gradients();
    for pid in 0..store.len() {
        for i in 0..store.value(pid).data.len() {
            let orig = store.value(pid).data[i];
            store.value_mut(pid).data[i] = orig + h;
            let plus = loss_fn(store);
            store.value_mut(pid).data[i] = orig - h;
            let minus = loss_fn(store);
            store.value_mut(pid).data[i] = orig;
            out[pid].data[i] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

/// Largest elementwise relative error between two gradient sets.
/// Elements where both magnitudes are below 1e-7 are treated as matching.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst: f64 = 0.0;
    for (a_mat, n_mat) in analytic.iter().zip(numeric) {
        for (&a, &n) in a_mat.data.iter().zip(&n_mat.data) {
            let denom = a.abs().max(n.abs());
            if denom < 1e-7 {
                continue;
            }
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}
