use crate::error::{Error, Result};
use crate::models::Param;

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape {
            op: "sgd_update",
            left: vec![param.len()],
            right: vec![grad.len(), velocity.len()],
        });
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with momentum. Weight decay is added to the gradient of every
/// parameter, batch-norm scale and shift included.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Param], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// Applies one update using each parameter's stored gradient (zero when
    /// absent).
    pub fn step(&mut self, params: &mut [Param], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: vec![params.len()],
                right: vec![self.velocity.len()],
            });
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.tensor.grad.take().unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            sgd_update(p.tensor.values_mut(), &grad, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}
