//! AdamW with decoupled weight decay.

use super::config::OptimConfig;
use super::TrainError;
use crate::nn::ParamStore;
use crate::tensor::{Precision, Tensor};

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One in-place AdamW update at step `t` (1-based): decay first, then the
/// bias-corrected Adam step.
pub fn adamw_update(param: &mut [f64], grad: &[f64], state: &mut Moments, t: u64, cfg: &OptimConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer state over the trainable parameters of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let state = store
            .params()
            .iter()
            .map(|p| p.trainable.then(|| Moments::zeros(p.value.len())))
            .collect();
        AdamW { cfg, step: 0, state }
    }

    /// `grads` is indexed like the store's parameters; frozen entries must be
    /// `None`. Trainable parameters without a gradient are treated as zero
    /// gradient (decay and momentum still apply).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], precision: Precision) -> Result<(), TrainError> {
        if grads.len() != self.state.len() || store.params().len() != self.state.len() {
            return Err(TrainError::Optimizer(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.state.len()
            )));
        }
        self.step += 1;
        for ((p, g), st) in store.params_mut().iter_mut().zip(grads).zip(&mut self.state) {
            let Some(st) = st else {
                if g.is_some() {
                    return Err(TrainError::Optimizer(format!("gradient for frozen parameter {}", p.name)));
                }
                continue;
            };
            if st.m.len() != p.value.len() {
                return Err(TrainError::Optimizer(format!(
                    "parameter {} changed size from {} to {}",
                    p.name,
                    st.m.len(),
                    p.value.len()
                )));
            }
            let zeros;
            let g = match g {
                Some(g) if g.shape() == p.value.shape() => g.data(),
                Some(g) => {
                    return Err(TrainError::Optimizer(format!(
                        "gradient shape {:?} for parameter {} of shape {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )))
                }
                None => {
                    zeros = vec![0.0; p.value.len()];
                    &zeros
                }
            };
            adamw_update(p.value.data_mut(), g, st, self.step, &self.cfg);
            if precision == Precision::F32 {
                p.value = p.value.clone().rounded(precision);
            }
        }
        Ok(())
    }
}
