use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared against it instead of
/// themselves: the f64 rounding of an O(1) loss leaves about 1e-11 of
/// noise in a central difference at ε = 1e-5.
pub const ROUNDING_FLOOR: f64 = 1e-5;

/// Worst relative disagreement between the tape gradient and the
/// fourth-order central difference
/// `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`, taken over every
/// parameter entry.
///
/// `loss` builds a scalar on a fresh graph from the current store values.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    store.zero_grad();
    {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        if !g.value(l).item().is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        g.backward(l, store);
    }

    let mut worst = 0.0_f64;
    for id in store.ids().collect::<Vec<_>>() {
        if store.is_frozen(id) {
            continue;
        }
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            let mut at = |k: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = orig + k * eps;
                eval(store)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            store.value_mut(id).data_mut()[i] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let analytic = store.grad(id).data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(ROUNDING_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
