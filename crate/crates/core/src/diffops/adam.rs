use serde::{Deserialize, Serialize};

use super::{OpError, OpResult, ParamTensor, Scalar, Tensor};

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone)]
pub struct MomentBuffers<T: Scalar> {
    pub name: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub hyper: AdamHyper,
    /// Number of completed updates.
    pub step: u64,
    /// One entry per parameter, in the order the parameters are presented.
    pub moments: Vec<MomentBuffers<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(AdamHyper::default())
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            moments: Vec::new(),
        }
    }

    fn ensure_moments(&mut self, params: &[&mut ParamTensor<T>]) -> OpResult<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| MomentBuffers {
                    name: p.name.clone(),
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                })
                .collect();
            return Ok(());
        }
        if self.moments.len() != params.len() {
            return Err(OpError::Invalid(format!(
                "optimizer tracks {} parameters, model presented {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (mb, p) in self.moments.iter().zip(params) {
            if mb.name != p.name || mb.m.shape() != p.value.shape() {
                return Err(OpError::Invalid(format!(
                    "optimizer slot {} does not match parameter {} {:?}",
                    mb.name,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One Adam update of every parameter from its accumulated gradient:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
///
/// with `m_hat = m / (1 - b1^t)` and `v_hat = v / (1 - b2^t)`. All gradients
/// are checked for finiteness before any parameter is touched.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut ParamTensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> OpResult<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(OpError::NonFiniteGradient {
            name: bad.name.clone(),
        });
    }
    state.ensure_moments(params)?;
    state.step += 1;
    let h = state.hyper;
    let t = state.step as f64;
    let b1 = T::from_f64_lossy(h.beta1);
    let b2 = T::from_f64_lossy(h.beta2);
    let one_b1 = T::from_f64_lossy(1.0 - h.beta1);
    let one_b2 = T::from_f64_lossy(1.0 - h.beta2);
    let corr1 = T::from_f64_lossy(1.0 - h.beta1.powf(t));
    let corr2 = T::from_f64_lossy(1.0 - h.beta2.powf(t));
    let eps = T::from_f64_lossy(h.eps);
    let lr = T::from_f64_lossy(lr);
    for (p, mb) in params.iter_mut().zip(state.moments.iter_mut()) {
        let g = p.grad.data();
        let m = mb.m.data_mut();
        let v = mb.v.data_mut();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
