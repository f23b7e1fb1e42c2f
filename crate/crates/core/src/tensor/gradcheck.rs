use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the analytic gradient of a scalar function against central
/// finite differences and returns the largest relative error
/// `|a − n| / max(1, |a|, |n|)` over all coordinates of `x0`.
///
/// `build` receives a fresh graph and the parameter node holding the probe
/// point and must return the scalar loss node.
pub fn grad_check<F>(build: F, x0: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let eval = |x: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.parameter(x);
        let loss = build(&mut g, p)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let p = g.parameter(x0.clone());
    let loss = build(&mut g, p)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x0.numel()]);

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
