//! Bias-corrected Adam. Moments live outside the tensors, parallel to the
//! parameter list the state was created from.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::TrainConfig;

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamState {
    moments: Vec<Moments>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        let moments = params
            .iter()
            .map(|(_, p)| Moments {
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            })
            .collect();
        AdamState { moments, t: 0 }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. A parameter without a gradient (not
    /// reached by the last backward pass) is treated as zero gradient: its
    /// value is unchanged, its moments decay. Any non-finite gradient
    /// aborts the whole step before anything is mutated.
    pub fn step(&mut self, params: &[(String, Tensor)], config: &TrainConfig) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "state built for {} parameters, got {}",
                    self.moments.len(),
                    params.len()
                ),
            ));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (name, param) in params {
            let grad = param.grad().unwrap_or_else(|| vec![0.0; param.numel()]);
            if grad.len() != param.numel() {
                return Err(Error::invalid(
                    "adam_step",
                    format!("gradient of {name} has wrong length"),
                ));
            }
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name}"),
                });
            }
            grads.push(grad);
        }

        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        for (((_, param), grad), moments) in
            params.iter().zip(&grads).zip(self.moments.iter_mut())
        {
            param.update_data(|theta| {
                for i in 0..theta.len() {
                    let g = grad[i];
                    moments.m[i] = config.beta1 * moments.m[i] + (1.0 - config.beta1) * g;
                    moments.v[i] = config.beta2 * moments.v[i] + (1.0 - config.beta2) * g * g;
                    let m_hat = moments.m[i] / bias1;
                    let v_hat = moments.v[i] / bias2;
                    theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
                }
            });
        }
        Ok(())
    }
}
