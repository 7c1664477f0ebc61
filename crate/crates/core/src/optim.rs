//! Dense Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;

pub const DEFAULT_LR: f64 = 1e-3;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }
}

/// Which tensors an update may touch. Gate tensors can be frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask {
    pub embeddings: bool,
    pub gates: bool,
}

impl Default for UpdateMask {
    fn default() -> Self {
        UpdateMask {
            embeddings: true,
            gates: true,
        }
    }
}

pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimizerState,
) -> Result<()> {
    adam_step_masked(params, grads, state, UpdateMask::default())
}

pub fn adam_step_masked(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimizerState,
    mask: UpdateMask,
) -> Result<()> {
    if !params.same_shape(grads)
        || !params.same_shape(&state.first_moment)
        || !params.same_shape(&state.second_moment)
    {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "{}x{} users/items at d={}",
                params.n_users(),
                params.n_items(),
                params.dim()
            ),
            actual: format!(
                "{}x{} users/items at d={}",
                grads.n_users(),
                grads.n_items(),
                grads.dim()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.lr);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);

    let p = params.tensors_mut();
    let g = grads.tensors();
    let m = state.first_moment.tensors_mut();
    let v = state.second_moment.tensors_mut();
    for (k, (((p, g), m), v)) in p.into_iter().zip(g).zip(m).zip(v).enumerate() {
        let enabled = if k < 2 { mask.embeddings } else { mask.gates };
        if !enabled {
            continue;
        }
        let p = p.as_mut_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for (j, &gj) in g.as_slice().iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            if lr != 0.0 {
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    match params.first_non_finite() {
        Some(name) => Err(Error::NonFinite(format!(
            "{name} after Adam step {}",
            state.step
        ))),
        None => Ok(()),
    }
}
