use crate::error::{Error, Result};

use super::{MultiExitModel, Params};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &MultiExitModel) -> Self {
        AdamState {
            m: model.params().zeros_like(),
            v: model.params().zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// Non-finite gradients leave both model and state untouched and report
/// divergence.
pub fn adam_step(
    model: &mut MultiExitModel,
    grads: &Params,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !grads.same_shape(model.params()) || !state.m.same_shape(model.params()) {
        return Err(Error::Contract("gradient or optimizer shapes do not match the model".into()));
    }
    if !grads.all_finite() {
        return Err(Error::Diverged {
            step: state.step as usize,
            message: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - ADAM_BETA1.powi(t);
    let correction2 = 1.0 - ADAM_BETA2.powi(t);

    let grad_groups = grads.groups();
    let mut m_groups = state.m.groups_mut();
    let mut v_groups = state.v.groups_mut();
    let mut p_groups = model.params_mut().groups_mut();
    for (gi, (_, g)) in grad_groups.iter().enumerate() {
        let (p, m, v) = (&mut p_groups[gi], &mut m_groups[gi], &mut v_groups[gi]);
        for k in 0..g.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / correction1;
            let v_hat = v[k] / correction2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
    Ok(())
}
