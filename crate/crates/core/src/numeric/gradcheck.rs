//! Finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::numeric::{Graph, ParamStore, Parameter, Rng, Var};

/// Parameters larger than this are checked on a seeded sample of elements.
pub const SAMPLE_THRESHOLD: usize = 64;

/// Central differences with a step near 1e-5 carry about 1e-11 of absolute
/// rounding error, so gradients much smaller than this are compared on an
/// absolute scale.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Worst relative error `|a − n| / max(|a|, |n|, DENOM_FLOOR)` between the analytic
/// gradient and a central difference with step `eps`, over every parameter
/// element (or `SAMPLE_THRESHOLD` sampled elements of larger parameters).
///
/// `loss` must be a deterministic function of the parameter values.
pub fn grad_check<F>(loss: F, store: &mut ParamStore, eps: f64, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(loss, store, eps, SAMPLE_THRESHOLD, rng)
}

pub fn grad_check_sampled<F>(
    loss: F,
    store: &mut ParamStore,
    eps: f64,
    max_per_param: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    check(loss, store, eps, max_per_param, |_| true, rng)
}

/// Like [`grad_check`] but only over parameters accepted by `filter`.
pub fn grad_check_where<F, P>(loss: F, store: &mut ParamStore, eps: f64, filter: P, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
    P: Fn(&Parameter) -> bool,
{
    check(loss, store, eps, SAMPLE_THRESHOLD, filter, rng)
}

fn check<F, P>(mut loss: F, store: &mut ParamStore, eps: f64, max_per_param: usize, filter: P, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
    P: Fn(&Parameter) -> bool,
{
    store.zero_grads();
    let mut g = Graph::new();
    let root = loss(&mut g, store)?;
    g.backward(root, store)?;
    drop(g);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let root = loss(&mut g, store)?;
        Ok(g.value(root).item())
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.iter().filter(|(_, p)| filter(p)).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let elems: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|_| rng.below(n)).collect()
        };
        for e in elems {
            let original = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = original + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = original - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.grad(id).data()[e];
            let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    store.zero_grads();
    Ok(worst)
}
