use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};

/// Crosscoder training default.
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-tensor optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub first_moment: Matrix<T>,
    pub second_moment: Matrix<T>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl<T: Real> AdamState<T> {
    pub fn new(rows: usize, cols: usize, hyper: AdamHyper) -> Self {
        Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            hyper,
        }
    }

    pub fn for_param(param: &Matrix<T>, hyper: AdamHyper) -> Self {
        Self::new(param.rows(), param.cols(), hyper)
    }
}

/// One bias-corrected Adam update of `param` in place.
///
/// The gradient is validated before anything is touched, so a rejected step
/// leaves both the parameter and the state unchanged.
pub fn adam_step<T: Real>(param: &mut Matrix<T>, grad: &Matrix<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::InvalidShape(format!(
            "adam: param {:?}, grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    adam_step_slice(param.as_mut_slice(), grad.as_slice(), state, lr)
}

/// [`adam_step`] over flat storage; the state must hold `param.len()` entries.
pub fn adam_step_slice<T: Real>(param: &mut [T], grad: &[T], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.first_moment.as_slice().len() {
        return Err(Error::InvalidShape(format!(
            "adam: param has {} entries, grad {}, state {}",
            param.len(),
            grad.len(),
            state.first_moment.as_slice().len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step_count += 1;
    let AdamHyper { beta1, beta2, epsilon } = state.hyper;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let m = state.first_moment.as_mut_slice();
    let v = state.second_moment.as_mut_slice();
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m).zip(v) {
        let g = g.as_f64();
        let mi = beta1 * m.as_f64() + (1.0 - beta1) * g;
        let vi = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
        *m = T::from_f64(mi);
        *v = T::from_f64(vi);
        let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + epsilon);
        *p = T::from_f64(p.as_f64() - update);
    }
    Ok(())
}
