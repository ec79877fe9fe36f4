use serde::{Deserialize, Serialize};

use crate::error::{CktError, Result};
use crate::tensor::{ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment estimates for every trainable tensor, indexed like its
/// [`ParamSet`].
#[derive(Clone, Debug)]
pub struct OptState {
    pub hyper: AdamW,
    slots: Vec<Moments>,
    pub steps: u64,
}

impl OptState {
    pub fn new(hyper: AdamW, params: &ParamSet) -> Self {
        OptState {
            hyper,
            slots: params
                .iter()
                .map(|(_, t)| Moments {
                    step: 0,
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                })
                .collect(),
            steps: 0,
        }
    }

    /// Updates of tensor `id` applied so far.
    pub fn tensor_steps(&self, id: ParamId) -> u64 {
        self.slots[id.index()].step
    }

    /// One decoupled-weight-decay Adam update. `grads[i]` is `None` for
    /// tensors that were not on this step's path; those are left untouched.
    /// Every id in `required` must have a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<f64>>],
        lr: f64,
        required: &[ParamId],
    ) -> Result<()> {
        if grads.len() != params.len() || self.slots.len() != params.len() {
            return Err(CktError::Integrity(format!(
                "optimizer holds {} slots but received {} gradients for {} tensors",
                self.slots.len(),
                grads.len(),
                params.len()
            )));
        }
        if let Some(id) = required.iter().find(|id| grads[id.index()].is_none()) {
            return Err(CktError::Integrity(format!(
                "trainable tensor '{}' received no gradient",
                params.name(*id)
            )));
        }
        let h = &self.hyper;
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let slot = &mut self.slots[i];
            slot.step += 1;
            let bc1 = 1.0 - h.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - h.beta2.powi(slot.step as i32);
            let t = params.get_mut(id);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                *p -= lr * h.weight_decay * *p;
                slot.m[j] = h.beta1 * slot.m[j] + (1.0 - h.beta1) * g[j];
                slot.v[j] = h.beta2 * slot.v[j] + (1.0 - h.beta2) * g[j] * g[j];
                let mhat = slot.m[j] / bc1;
                let vhat = slot.v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}
