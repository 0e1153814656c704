use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::optim::TrainConfig;

/// First and second moment estimates per registry entry, plus the update
/// count. Moments are stored in `f32`; the update itself is computed in `f64`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn from_config(params: &ParamStore, config: &TrainConfig) -> Self {
        Self::new(params, config.beta1, config.beta2, config.adam_eps)
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.grads_ready() {
        return Err(Error::MissingGradients);
    }
    if state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "optimizer state tracks {} tensors, store has {}",
                state.m.len(),
                params.len()
            ),
        ));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for (((x, &g), m), v) in value
            .iter_mut()
            .zip(grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g as f64;
            let m_new = b1 * *m as f64 + (1.0 - b1) * g;
            let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + state.eps);
            *x = (*x as f64 - step) as f32;
        }
    }
    Ok(())
}
