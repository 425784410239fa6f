//! Central finite-difference gradient checking.
//!
//! Used throughout the test suite to verify every backward rule against the
//! independent numerical derivative (f(x+h) - f(x-h)) / 2h in f64.

use ndarray::ArrayD;

use super::{Graph, TensorId};
use crate::nn::ParamStore;

/// Relative error with a floor so that near-zero gradient pairs compare
/// absolutely at 1e-2 scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Check gradients w.r.t. explicit inputs.
///
/// `build` receives a fresh graph plus the input nodes (in order) and returns
/// a scalar loss node. Returns the maximum relative error over all input
/// entries.
pub fn grad_check_inputs<F>(build: F, inputs: &[ArrayD<f64>], h: f64) -> f64
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::train_mode();
        let ids: Vec<TensorId> = arrays.iter().map(|a| g.var(a.clone())).collect();
        let loss = build(&mut g, &ids);
        g.scalar(loss)
    };

    // Analytic gradients.
    let mut g = Graph::train_mode();
    let ids: Vec<TensorId> = inputs.iter().map(|a| g.var(a.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss);

    let mut max_err = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zero = ArrayD::zeros(input.raw_dim());
        let analytic = grads.get(ids[i]).unwrap_or(&zero);
        for idx in 0..input.len() {
            let orig = work[i].as_slice_mut().unwrap()[idx];
            work[i].as_slice_mut().unwrap()[idx] = orig + h;
            let fp = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - h;
            let fm = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let ga = analytic.as_slice().unwrap()[idx];
            max_err = max_err.max(rel_err(ga, numeric));
        }
    }
    max_err
}

/// Check gradients w.r.t. trainable parameters of a store.
///
/// `forward` runs a full model forward returning the scalar loss. For each
/// trainable parameter at most `entries_per_param` evenly spaced entries are
/// perturbed. Returns the maximum relative error.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    forward: F,
    entries_per_param: usize,
    h: f64,
) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> TensorId,
{
    let mut g = Graph::train_mode();
    let loss = forward(&mut g, store);
    let mut grads = g.backward(loss);
    let pgrads = g.param_grads(&mut grads);
    let by_pid: std::collections::HashMap<_, _> = pgrads.into_iter().collect();

    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::train_mode();
        let loss = forward(&mut g, store);
        g.scalar(loss)
    };

    let mut max_err = 0.0f64;
    let pids: Vec<_> = store.trainable_ids();
    for pid in pids {
        let n = store.value(pid).len();
        let stride = (n / entries_per_param).max(1);
        let zero = ArrayD::zeros(store.value(pid).raw_dim());
        let analytic = by_pid.get(&pid).unwrap_or(&zero).clone();
        let mut idx = 0;
        while idx < n {
            let mut v = store.value(pid).clone();
            let orig = v.as_slice().unwrap()[idx];
            v.as_slice_mut().unwrap()[idx] = orig + h;
            store.set_value(pid, v.clone());
            let fp = eval(store);
            v.as_slice_mut().unwrap()[idx] = orig - h;
            store.set_value(pid, v.clone());
            let fm = eval(store);
            v.as_slice_mut().unwrap()[idx] = orig;
            store.set_value(pid, v);
            let numeric = (fp - fm) / (2.0 * h);
            let ga = analytic.as_slice().unwrap()[idx];
            max_err = max_err.max(rel_err(ga, numeric));
            idx += stride;
        }
    }
    max_err
}
