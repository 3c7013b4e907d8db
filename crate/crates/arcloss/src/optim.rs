//! Adam with bias correction and schedule-driven lr / beta1.
//!
//! beta1 varies over training, so the bias-correction powers are kept as
//! running products of the values actually used at each step.

use crate::error::{Error, Result};
use crate::tape::Parameter;
use crate::tensor::Tensor;

pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    beta1_prod: f64,
    beta2_prod: f64,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(&p.value.shape)).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.value.shape)).collect(),
            step: 0,
            beta1_prod: 1.0,
            beta2_prod: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut [Parameter], lr: f64, beta1: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} (shape {:?}) at optimizer step {}",
                    p.grad.shape,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        self.beta1_prod *= beta1;
        self.beta2_prod *= ADAM_BETA2;
        let bc1 = 1.0 - self.beta1_prod;
        let bc2 = 1.0 - self.beta2_prod;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for ((w, g), (mi, vi)) in p
                .value
                .data
                .iter_mut()
                .zip(&p.grad.data)
                .zip(m.data.iter_mut().zip(v.data.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
