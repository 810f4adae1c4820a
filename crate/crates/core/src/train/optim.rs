use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for every parameter tensor, in the model's
/// canonical tensor order.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub hyper: AdamWConfig,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(shapes: &[&[usize]], hyper: AdamWConfig) -> Result<Self> {
        let zeros = shapes
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn for_model(model: &Model<f64>, hyper: AdamWConfig) -> Result<Self> {
        let tensors = model.tensors();
        let shapes: Vec<&[usize]> = tensors.iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes, hyper)
    }
}

/// One decoupled-weight-decay Adam update, in place.
///
/// A non-finite gradient leaves parameters and state untouched.
pub fn adamw_step(params: &mut [&mut Tensor<f64>], grads: &[&Tensor<f64>], state: &mut AdamWState, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi = *pi * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// [`adamw_step`] over every tensor of a model.
pub fn adamw_step_model(model: &mut Model<f64>, grads: &Model<f64>, state: &mut AdamWState, lr: f64) -> Result<()> {
    let g: Vec<&Tensor<f64>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    let mut p = model.tensors_mut();
    adamw_step(&mut p, &g, state, lr)
}
