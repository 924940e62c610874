//! First-order optimizers for the training loop: Adam (default) and SGD.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    LengthMismatch { params: usize, grads: usize },
    #[error("non-finite gradient component at index {0}")]
    NonFiniteGradient(usize),
}

/// Adam hyperparameters. Defaults are the standard recommended values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state. `step` counts completed updates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(n: usize, params: AdamParams) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            params,
        }
    }
}

fn check(params: &[f64], grad: &[f64]) -> Result<(), OptimError> {
    if params.len() != grad.len() {
        return Err(OptimError::LengthMismatch {
            params: params.len(),
            grads: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient(i));
    }
    Ok(())
}

/// One Adam update: biased moment estimates, bias correction, element-wise
/// step `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
) -> Result<(), OptimError> {
    check(params, grad)?;
    assert_eq!(state.m.len(), params.len());
    state.step += 1;
    let AdamParams {
        lr,
        beta1,
        beta2,
        eps,
    } = state.params;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<(), OptimError> {
    check(params, grad)?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}
