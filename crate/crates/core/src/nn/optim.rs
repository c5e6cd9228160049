//! Momentum SGD.

use super::params::ParamSet;
use crate::error::{config, Error, Result};

/// Heavy-ball SGD: `v ← μ·v + g`, `θ ← θ − lr·v`. Holds one velocity buffer
/// per trainable tensor of the parameter set it is first stepped with.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(config(format!("invalid SGD settings lr={lr}, momentum={momentum}")));
        }
        Ok(Self { lr, momentum, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    /// Applies one step and clears the gradients. A non-finite gradient
    /// aborts the step before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamSet<f64>) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diagnostic(format!("non-finite gradient in {}[{i}]", p.name)));
            }
        }
        if self.velocity.is_empty() {
            self.velocity =
                params.iter().filter(|p| p.trainable).map(|p| vec![0.0; p.len()]).collect();
        }
        let trainable: Vec<_> = params.iter_mut().filter(|p| p.trainable).collect();
        if trainable.len() != self.velocity.len() {
            return Err(config("optimizer state does not match parameter set"));
        }
        for (p, v) in trainable.into_iter().zip(self.velocity.iter_mut()) {
            if v.len() != p.len() {
                return Err(config(format!("optimizer state for {} has wrong length", p.name)));
            }
            for ((theta, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + g;
                *theta -= self.lr * *vel;
            }
        }
        params.zero_grad();
        Ok(())
    }
}
