use super::params::ParamVector;

/// Descent step `params - lr * grad`.
pub fn sgd_step(params: &mut ParamVector, grad: &ParamVector, lr: f64) {
    params.axpy(-lr, grad);
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        Self::with_hyper(like, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(like: &ParamVector, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam descent step on `params`.
pub fn adam_step(state: &mut AdamState, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
    assert!(params.is_aligned(grad) && state.m.is_aligned(params));
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let blocks = params
        .blocks_mut()
        .iter_mut()
        .zip(grad.blocks())
        .zip(state.m.blocks_mut().iter_mut().zip(state.v.blocks_mut().iter_mut()));
    for ((p, g), (m, v)) in blocks {
        for i in 0..p.values.len() {
            let gi = g.values[i];
            m.values[i] = b1 * m.values[i] + (1.0 - b1) * gi;
            v.values[i] = b2 * v.values[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.values[i] / bc1;
            let v_hat = v.values[i] / bc2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
