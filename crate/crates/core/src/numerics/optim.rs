use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One bias-corrected Adam update of `params` in place. State buffers are
/// zero-initialized on the first call.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    if state.step == 0 {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every parameter of a store that carries a gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let lr = self.config.lr;
        self.step_with(store, |_| lr)
    }

    /// Like [`Adam::step`] with a per-parameter learning rate.
    pub fn step_with(&mut self, store: &mut ParamStore, lr_for: impl Fn(ParamId) -> f64) -> Result<()> {
        if self.states.len() < store.len() {
            self.states.resize_with(store.len(), AdamState::default);
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            adam_step(t.data_mut(), &g, lr_for(id), &self.config, &mut self.states[id.index()])?;
        }
        Ok(())
    }
}
