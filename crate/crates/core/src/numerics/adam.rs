use serde::{Deserialize, Serialize};

use super::{ef, Element, NumericsError, Tensor};

/// Hyperparameters for the bias-corrected adaptive-moment update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment buffers per parameter tensor plus a monotone step
/// counter.
pub struct AdamState<E: Element> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(cfg: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let m = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        let v = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn for_params(cfg: AdamConfig, params: &[Tensor<E>]) -> Self {
        Self::new(cfg, &params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over congruent (params, grads) slices.
pub fn adam_step<E: Element>(
    params: &mut [Tensor<E>],
    grads: &[Tensor<E>],
    state: &mut AdamState<E>,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::Invalid(format!(
            "adam_step arity mismatch: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NumericsError::ShapeMismatch { expected: p.shape().to_vec(), got: g.shape().to_vec() });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.cfg.beta1, state.cfg.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let lr = ef::<E>(state.cfg.lr);
    let eps = ef::<E>(state.cfg.eps);
    let (eb1, eb2) = (ef::<E>(b1), ef::<E>(b2));
    let (ebc1, ebc2) = (ef::<E>(bc1), ef::<E>(bc2));
    let one = E::one();

    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = eb1 * md[i] + (one - eb1) * gi;
            vd[i] = eb2 * vd[i] + (one - eb2) * gi * gi;
            let mhat = md[i] / ebc1;
            let vhat = vd[i] / ebc2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
