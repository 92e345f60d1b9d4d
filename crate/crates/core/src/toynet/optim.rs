use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
/// With `max_grad_norm` set, `g` is first rescaled so its global L2 norm
/// does not exceed it.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            max_grad_norm: None,
            velocity: params.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        if grads.values().len() != self.velocity.len() {
            return Err(Error::Shape("gradients do not match optimizer state".into()));
        }
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grads.values().iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for ((p, g), v) in params.params_mut().iter_mut().zip(grads.values()).zip(&mut self.velocity) {
            for ((x, &gi), vi) in p.value.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + scale * gi;
                *x -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}
