use super::param::Module;
use crate::error::{Error, Result};

/// `s <- p * s - lr * g; w <- w + s`.
pub fn momentum_update(value: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((w, s), g) in value.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *s = momentum * *s - lr * g;
        *w += *s;
    }
}

/// Stochastic gradient descent with classical momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum }
    }

    /// Applies one update to every trainable parameter. Gradients are
    /// validated first so a non-finite entry leaves the model untouched.
    pub fn step<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut bad = None;
        model.visit_params("", &mut |name, p| {
            if bad.is_none() && p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let (lr, momentum) = (self.lr, self.momentum);
        model.visit_params_mut("", &mut |_, p| {
            if p.trainable {
                momentum_update(p.value.data_mut(), &mut p.velocity, &p.grad, lr, momentum);
            }
        });
        Ok(())
    }
}
