//! Finite-difference verification of parameter gradients for whole blocks.

use icst_tensor::{relative_error, Graph, ParamId, ParamStore, Var};

use crate::error::{IcstError, Result};

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn scalar_loss(
    store: &ParamStore,
    loss: &impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    if g.value(out).numel() != 1 {
        return Err(IcstError::Config(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, out))
}

/// Compare reverse-mode parameter gradients of `loss` with central
/// differences of step `h`, over `ids` (every parameter when `None`).
pub fn check_param_gradients(
    store: &ParamStore,
    ids: Option<&[ParamId]>,
    h: f64,
    loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<ParamCheckReport> {
    let (g, out) = scalar_loss(store, &loss)?;
    let grads = g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    analytic.accumulate(&g, &grads);

    let all: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = ParamCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    for id in all {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            probe.param_mut(id).value.data_mut()[i] = orig + h;
            let (gp, op) = scalar_loss(&probe, &loss)?;
            let fp = gp.value(op).item();
            probe.param_mut(id).value.data_mut()[i] = orig - h;
            let (gm, om) = scalar_loss(&probe, &loss)?;
            let fm = gm.value(om).item();
            probe.param_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.param(id).grad.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.param(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduce `out` to a scalar with fixed, distinct weights so every element
/// receives its own upstream gradient.
pub fn probe_sum(g: &mut Graph, out: Var) -> Result<Var> {
    let w = icst_tensor::Tensor::from_fn(g.shape(out), |i| ((i as f64) * 0.618 + 0.3).sin());
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}
