//! Accuracy, input-space robustness, Hessian flatness and loss slices.

mod hessian;
mod landscape;

pub use hessian::{
    flatness, hvp, spectral_norm, trace_hutchinson, FlatnessConfig, FlatnessReport, ModelObjective, Objective,
    PowerConfig, SpectralEstimate, TraceEstimate,
};
pub use landscape::{filter_normalized_direction, grid_coords, loss_slice, model_loss_slice, LossSlice};

use serde::Serialize;

use crate::afan::sign;
use crate::error::{check_finite, Error, Result};
use crate::models::{argmax_rows, BnMode, SplitModel};
use crate::par::map_indexed;
use crate::tensor::{Tape, Tensor};

const EVAL_CHUNK: usize = 128;

/// A frozen classifier: logits and the input gradient of its mean
/// cross-entropy.
pub trait Classifier: Sync {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    fn input_loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

/// Evaluation-mode batch norm, constant parameters.
impl Classifier for SplitModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_logits(x)
    }

    fn input_loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let mut b = self.bind(&mut tape, BnMode::Eval, false);
        let xv = tape.variable(x);
        let z = self.forward(&mut tape, &mut b, xv)?;
        let loss = tape.softmax_xent(z, labels)?;
        tape.backward(loss)?;
        Ok((tape.scalar(loss), tape.grad_tensor(xv)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub alpha: f64,
    /// Radius of the ∞-ball around the clean input. Zero leaves inputs
    /// untouched.
    pub epsilon: f64,
    pub clamp: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 20,
            alpha: 2.0 / 255.0,
            epsilon: 8.0 / 255.0,
            clamp: (0.0, 1.0),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("attack.steps", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("attack.alpha", "must be positive"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("attack.epsilon", "must be non-negative"));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::invalid("attack.clamp", "lower bound must be below upper bound"));
        }
        Ok(())
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(EVAL_CHUNK))
        .map(|c| c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n))
        .collect()
}

fn rows(x: &Tensor, r: &std::ops::Range<usize>) -> Result<Tensor> {
    x.select_rows(&r.clone().collect::<Vec<_>>())
}

fn check_labeled(x: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    if x.batch() != labels.len() {
        return Err(Error::Shape {
            op: "labeled inputs",
            left: x.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    Ok(())
}

/// Predicted classes, evaluated in fixed-size chunks.
pub fn predict<C: Classifier + ?Sized>(model: &C, x: &Tensor) -> Result<Vec<usize>> {
    let ranges = chunk_ranges(x.batch());
    let parts = map_indexed(ranges.len(), |c| Ok(argmax_rows(&model.logits(&rows(x, &ranges[c])?)?)));
    let mut out = Vec::with_capacity(x.batch());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn standard_accuracy<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labeled(x, labels)?;
    let pred = predict(model, x)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// One projected sign-ascent step on inputs.
fn attack_step(x_adv: &mut [f64], x: &[f64], grad: &[f64], cfg: &AttackConfig) {
    for ((a, &c), &g) in x_adv.iter_mut().zip(x).zip(grad) {
        let v = (*a + cfg.alpha * sign(g)).max(c - cfg.epsilon).min(c + cfg.epsilon);
        *a = v.max(cfg.clamp.0).min(cfg.clamp.1);
    }
}

/// Attack on one chunk, returning the loss before each step and after the
/// last one.
fn attack_chunk<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor, Vec<f64>)> {
    let mut x_adv = x.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (loss, grad) = model.input_loss_grad(&x_adv, labels)?;
        check_finite(grad.values(), "input gradient")?;
        losses.push(loss);
        attack_step(x_adv.values_mut(), x.values(), grad.values(), cfg);
    }
    losses.push(model.input_loss_grad(&x_adv, labels)?.0);
    Ok((x_adv, losses))
}

/// PGD on inputs from a zero start, projected onto the ε-ball around `x`
/// and clamped to the input range after every step.
pub fn pgd_input_attack<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_labeled(x, labels)?;
    let ranges = chunk_ranges(x.batch());
    let parts = map_indexed(ranges.len(), |c| {
        let r = &ranges[c];
        attack_chunk(model, &rows(x, r)?, &labels[r.clone()], cfg).map(|(xa, _)| xa)
    });
    let mut values = Vec::with_capacity(x.len());
    for p in parts {
        values.extend_from_slice(p?.values());
    }
    Tensor::new(x.shape().to_vec(), values)
}

/// Mean loss at every attack iterate of a single batch (`steps + 1` values).
pub fn pgd_input_trace<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_labeled(x, labels)?;
    Ok(attack_chunk(model, x, labels, cfg)?.1)
}

pub fn robust_accuracy<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<f64> {
    let x_adv = pgd_input_attack(model, x, labels, cfg)?;
    standard_accuracy(model, &x_adv, labels)
}
