use super::ParamStore;
use crate::error::{contract, Result};

/// Learning rate used by the original full-scale training recipe.
pub const PAPER_LEARNING_RATE: f64 = 1e-5;

/// Bias-corrected Adam moments for a set of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the step counter. Call once per optimizer step, before the
    /// per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter tensor in place. `slot` identifies its moment
    /// buffers.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return contract(format!(
                "adam: parameter has {} entries but gradient has {}",
                param.len(),
                grad.len()
            ));
        }
        if self.step == 0 {
            return contract("adam: update before begin_step");
        }
        while self.first.len() <= slot {
            self.first.push(Vec::new());
            self.second.push(Vec::new());
        }
        if self.first[slot].is_empty() {
            self.first[slot] = vec![0.0; param.len()];
            self.second[slot] = vec![0.0; param.len()];
        } else if self.first[slot].len() != param.len() {
            return contract(format!(
                "adam: moment buffer {slot} has {} entries, parameter has {}",
                self.first[slot].len(),
                param.len()
            ));
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One step over every trainable parameter in the store. Frozen
    /// parameters are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.begin_step();
        for (slot, p) in store.params_mut().iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            self.update(slot, p.value.data_mut(), p.grad.data())?;
        }
        Ok(())
    }
}
