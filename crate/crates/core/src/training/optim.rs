//! Adam, global-norm clipping and the plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// A validation loss must beat the best by this much to count as improved.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.specs().iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.spec(ParamId(i)).shape.as_slice() || state.m[i].shape() != g.shape() {
            return Err(Error::contract(format!(
                "adam: gradient for `{}` has shape {:?}",
                params.spec(ParamId(i)).name,
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let id = ParamId(i);
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let mut w = params.get(id).clone();
        for (((w, m), v), &g) in w.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        params.set(id, w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauDecision {
    Continue,
    Halved,
    /// The learning rate fell below the floor.
    Stop,
}

/// Halve-on-plateau schedule state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
}

impl Plateau {
    pub fn new(lr: f64, patience: usize, factor: f64, floor: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
            patience,
            factor,
            floor,
        }
    }

    /// Feeds one validation loss. Once more than `patience` epochs pass
    /// without improvement the rate is multiplied by `factor` and the
    /// counter resets; a rate below `floor` signals [`PlateauDecision::Stop`].
    pub fn step(&mut self, valid_loss: f64) -> Result<PlateauDecision> {
        if !valid_loss.is_finite() {
            return Err(Error::Data(format!("non-finite validation loss {valid_loss}")));
        }
        if valid_loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = valid_loss;
            self.epochs_since_improvement = 0;
            return Ok(PlateauDecision::Continue);
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement <= self.patience {
            return Ok(PlateauDecision::Continue);
        }
        self.epochs_since_improvement = 0;
        self.lr *= self.factor;
        Ok(if self.lr < self.floor {
            PlateauDecision::Stop
        } else {
            PlateauDecision::Halved
        })
    }
}
