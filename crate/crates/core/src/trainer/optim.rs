use std::collections::BTreeMap;

use super::config::OptimizerConfig;
use crate::error::{invalid, Result};
use crate::numkernel::Tensor;

/// `base_lr · (1 − step/total_steps)`.
pub fn lr_at_step(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(invalid!("step {step} outside schedule of {total_steps} steps"));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

/// AdamW state: bias-corrected moments with decoupled weight decay. Each
/// tensor keeps its own step count, so tensors that receive no gradient in
/// a step (the other taxon's experts and heads in a single-taxon batch) are
/// left untouched, as in PyTorch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    pub steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. Returns `Ok(false)` and changes nothing when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &OptimizerConfig) -> Result<bool> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| invalid!("gradient for unknown parameter {name:?}"))?;
            if p.shape() != g.shape() {
                return Err(invalid!("gradient of {name:?} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
            }
        }
        if let Some(name) = grads.iter().find(|(_, g)| !g.all_finite()).map(|(n, _)| n) {
            log::warn!("non-finite gradient for {name}; step skipped");
            return Ok(false);
        }
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
            let decay = 1.0 - lr * cfg.weight_decay;
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *p *= decay;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(true)
    }
}
