//! Adam optimizer and the warmup + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{GradAccum, ParamGroup, ParamStore};
use crate::tensor::Matrix;

/// Learning rate at `step` (0-based) out of `total_steps`: linear warmup from
/// zero to `peak` over `warmup_steps`, then cosine decay from `peak` to zero
/// over the remaining steps.
///
/// The warmup ramp reaches `peak` at the first post-warmup step, i.e. step
/// `s < warmup` uses `peak * (s + 1) / (warmup + 1)` so the very first step
/// already makes progress.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("cosine_lr: total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr: step {step} out of range for {total_steps} total steps"
        )));
    }
    if warmup_steps >= total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr: warmup {warmup_steps} must be shorter than total {total_steps}"
        )));
    }
    if step < warmup_steps {
        // Linear 0 -> peak; the cosine branch takes over exactly at peak.
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with bias correction and no weight decay. First/second moment state
/// is stored in f32 (it is checkpointed verbatim); the update itself is
/// computed in f64.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Number of completed steps; bias correction uses `t + 1`.
    t: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// Apply one update. `lr_body` / `lr_text` select the learning rate per
    /// parameter group.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradAccum,
        lr_body: f64,
        lr_text: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            let lr = match store.group(id) {
                ParamGroup::Body => lr_body,
                ParamGroup::Text => lr_text,
            };
            let g = grads.of(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            if g.shape() != m.shape() {
                return Err(Error::Contract(format!(
                    "optimizer state shape mismatch for {:?}",
                    store.name(id)
                )));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {:?} at index {i}",
                    store.name(id)
                )));
            }
            let p = store.value_mut(id);
            for i in 0..p.len() {
                let gi = g.data()[i] as f64;
                let mi = self.beta1 * m.data()[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + self.eps);
                p.data_mut()[i] = (p.data()[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }

    pub fn moments(&self, index: usize) -> (&Matrix, &Matrix) {
        (&self.m[index], &self.v[index])
    }

    /// Restore optimizer state (used when resuming from a checkpoint).
    pub fn restore(&mut self, t: usize, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Data(format!(
                "optimizer state has {} tensors, expected {}",
                m.len(),
                self.m.len()
            )));
        }
        for (new, cur) in m.iter().zip(self.m.iter()).chain(v.iter().zip(self.v.iter())) {
            if new.shape() != cur.shape() {
                return Err(Error::Data(format!(
                    "optimizer state shape {:?} does not match expected {:?}",
                    new.shape(),
                    cur.shape()
                )));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
