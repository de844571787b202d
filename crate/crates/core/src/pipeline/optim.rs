use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Adam without weight decay. Learning rates are chosen per parameter at
/// each step so one optimizer can serve several parameter groups.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter with a gradient and a learning
    /// rate from `lr`; others are left untouched.
    pub fn step(
        &mut self,
        model: &mut Model<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: &dyn Fn(&str) -> Option<f64>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (name, g) in grads {
            let Some(rate) = lr(name) else { continue };
            let w = model
                .tensor_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown tensor {name}")))?;
            if w.shape() != g.shape() {
                return Err(Error::shape("adam", format!("{name}: {:?} vs {:?}", w.shape(), g.shape())));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let step_size = (rate / bc1) as f32;
            let inv_bc2 = (1.0 / bc2) as f32;
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            if !w.is_finite() {
                return Err(Error::NumericFault { op: "adam" });
            }
        }
        Ok(())
    }
}
