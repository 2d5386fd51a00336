use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &Parameters<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros = || {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), Tensor::zeros(p.value.shape().to_vec())))
                .collect()
        };
        Ok(Self { config, t: 0, m: zeros(), v: zeros() })
    }

    /// Number of scalar slots per moment.
    pub fn slots(&self) -> usize {
        self.m.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        let cast = |m: &IndexMap<String, Tensor<T>>| {
            m.iter().map(|(k, t)| (k.clone(), t.cast())).collect()
        };
        AdamState { config: self.config, t: self.t, m: cast(&self.m), v: cast(&self.v) }
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
///
/// Every parameter must carry a gradient; nothing is modified otherwise.
pub fn adam_step<T: Scalar>(params: &mut Parameters<T>, state: &mut AdamState<T>) -> Result<()> {
    for (name, p) in params.iter() {
        let Some(g) = &p.grad else {
            return Err(Error::Usage(format!("parameter `{name}` has no gradient")));
        };
        let (Some(m), Some(v)) = (state.m.get(name), state.v.get(name)) else {
            return Err(Error::Usage(format!("optimizer has no state for `{name}`")));
        };
        if g.shape() != p.value.shape() || m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::Usage(format!("gradient or moment shape mismatch for `{name}`")));
        }
    }
    if params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }

    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

    for (name, p) in params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
