use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Moment estimates for every parameter, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { m: BTreeMap::new(), v: BTreeMap::new(), step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in
/// `params`. A parameter without a gradient counts as zero gradient.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    if !state.lr.is_finite() {
        return Err(Error::NonFinite("learning rate".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let shape = p.shape().to_vec();
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
        if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
            return Err(Error::shape("adam_step", format!("moments of `{name}` do not match {shape:?}")));
        }
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
        let (md, vd) = (m.data_mut(), v.data_mut());
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let g = grad[i];
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}
