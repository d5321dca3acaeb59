use indexmap::IndexMap;

use super::params::ParamStore;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.moments.get(name).map(|m| &m.0)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.moments.get(name).map(|m| &m.1)
    }
}

/// One bias-corrected Adam update over every parameter in `params`.
///
/// The step is rejected as a whole, before anything is modified, if any
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient of `{}`", bad.name),
        });
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::c(beta1), T::c(beta2));
    for p in params.iter_mut() {
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (Tensor::zeros(p.value.shape().to_vec()), Tensor::zeros(p.value.shape().to_vec())));
        let updates = p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &g), (mi, vi)) in updates {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = mi.f64() / c1;
            let vhat = vi.f64() / c2;
            *w -= T::c(lr * mhat / (vhat.sqrt() + eps));
        }
    }
    Ok(())
}
