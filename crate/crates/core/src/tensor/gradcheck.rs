//! Central-difference verification of analytic gradients.

use super::{Graph, NodeId, ParamStore, Real};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn eval<F: Real, L>(store: &ParamStore<F>, loss_fn: &mut L) -> Result<f64>
where
    L: FnMut(&mut Graph<F>, &ParamStore<F>) -> Result<NodeId>,
{
    let mut g = Graph::inference();
    let out = loss_fn(&mut g, store)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!("gradient check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.data()[0].as_f64())
}

/// Compares the analytic gradient of `loss_fn` with central differences over
/// every element of every non-frozen parameter and returns
/// `max |analytic − numeric| / (|numeric| + 1e-12)`.
///
/// Parameter gradients are zeroed first and left holding the analytic
/// gradient afterwards.
pub fn finite_diff_check<F: Real, L>(store: &mut ParamStore<F>, step: f64, loss_fn: L) -> Result<f64>
where
    L: FnMut(&mut Graph<F>, &ParamStore<F>) -> Result<NodeId>,
{
    check(store, step, None, loss_fn)
}

/// As [`finite_diff_check`], but probes at most `per_param` randomly chosen
/// elements of each parameter.
pub fn finite_diff_check_sampled<F: Real, L>(
    store: &mut ParamStore<F>,
    step: f64,
    per_param: usize,
    seed: u64,
    loss_fn: L,
) -> Result<f64>
where
    L: FnMut(&mut Graph<F>, &ParamStore<F>) -> Result<NodeId>,
{
    check(store, step, Some((per_param, seed)), loss_fn)
}

fn check<F: Real, L>(store: &mut ParamStore<F>, step: f64, sample: Option<(usize, u64)>, mut loss_fn: L) -> Result<f64>
where
    L: FnMut(&mut Graph<F>, &ParamStore<F>) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Value(format!("finite-difference step must be positive, got {step}")));
    }
    store.zero_grads();
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let l0 = g.value(loss).data()[0].as_f64();
    g.backward(loss, store)?;

    let again = eval(store, &mut loss_fn)?;
    if again.to_bits() != l0.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {l0} then {again}"
        )));
    }

    let mut rng = sample.map(|(_, seed)| SeededRng::new(seed));
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.get(id).value.len();
        let coords: Vec<usize> = match (&mut rng, sample) {
            (Some(rng), Some((k, _))) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = F::lit(orig.as_f64() + step);
            let fp = eval(store, &mut loss_fn)?;
            store.get_mut(id).value.data_mut()[i] = F::lit(orig.as_f64() - step);
            let fm = eval(store, &mut loss_fn)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = store.get(id).grad.data()[i].as_f64();
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
