use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One parameter together with the gradient computed for it this step.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: Option<Tensor>,
}

/// SGD with heavy-ball momentum, L2 weight decay and a per-epoch
/// exponential learning-rate schedule `lr(e) = base · decay^e`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub base_lr: f64,
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(base_lr: f64, decay: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            base_lr,
            decay,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi(epoch as i32)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr(epoch)·v`.
    ///
    /// Every parameter must carry a gradient; the gradients are consumed.
    pub fn step(&mut self, params: Vec<ParamUpdate<'_>>, epoch: usize) -> Result<()> {
        if let Some(missing) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(missing.name.to_string()));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Result<_>>()?;
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, step received {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = self.learning_rate(epoch);
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let grad = p.grad.expect("checked above");
            if grad.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let velocity = v.data_mut();
            let value = p.value.data_mut();
            for ((vel, theta), g) in velocity.iter_mut().zip(value.iter_mut()).zip(grad.data()) {
                *vel = self.momentum * *vel + (g + self.weight_decay * *theta);
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }
}
