//! Adam optimizer over a [`Params`] registry.
//!
//! Moments live in the optimizer, aligned with the registry's push order,
//! so one `Adam` must stay paired with one `Params` for its whole life.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::param::Params;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u32,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(params: &Params) -> Adam {
        Adam::with_settings(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
            .expect("default settings are valid")
    }

    pub fn with_settings(params: &Params, beta1: f64, beta2: f64, eps: f64) -> Result<Adam> {
        for (name, value) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(Error::Config(format!("adam {name} must be in [0, 1), got {value}")));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be positive, got {eps}")));
        }
        let m = params.iter().map(|p| Array::zeros(p.value.shape())).collect();
        let v = params.iter().map(|p| Array::zeros(p.value.shape())).collect();
        Ok(Adam { beta1, beta2, eps, step: 0, m, v })
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One bias-corrected update from the gradients currently stored on
    /// `params`. Every parameter must carry a finite gradient.
    pub fn step(&mut self, params: &mut Params, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::op(
                "adam_step",
                format!("registry has {} parameters, optimizer tracks {}", params.len(), self.m.len()),
            ));
        }
        for p in params.iter() {
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::op("adam_step", format!("parameter {:?} has no gradient", p.name))
            })?;
            if !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {:?}",
                    p.name
                )));
            }
            if grad.shape() != p.value.shape() {
                return Err(Error::op(
                    "adam_step",
                    format!(
                        "gradient shape {:?} does not match parameter {:?} of shape {:?}",
                        grad.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut value = p.value.data().to_vec();
            let mut m_data = m.data().to_vec();
            let mut v_data = v.data().to_vec();
            for (((val, mi), vi), &g) in
                value.iter_mut().zip(&mut m_data).zip(&mut v_data).zip(grad.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *val -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let shape = p.value.shape().to_vec();
            p.value = Array::from_vec(shape.clone(), value)?;
            *m = Array::from_vec(shape.clone(), m_data)?;
            *v = Array::from_vec(shape, v_data)?;
        }
        Ok(())
    }
}
