use crate::error::{check_finite, Error, Result};
use crate::models::{BnMode, SplitModel};
use crate::tensor::{Tape, Tensor};

/// Anything that maps split-point features to a scalar loss with a gradient.
pub trait FeatureHead {
    fn loss_and_grad(&self, f: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

/// The model head with training-mode batch norm and frozen parameters.
impl FeatureHead for SplitModel {
    fn loss_and_grad(&self, f: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let mut b = self.bind(&mut tape, BnMode::Train, false);
        let fv = tape.variable(f);
        let out = self.forward_head(&mut tape, &mut b, fv, labels)?;
        tape.backward(out.loss)?;
        Ok((tape.scalar(out.loss), tape.grad_tensor(fv)))
    }
}

/// `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One projected sign-ascent step: `clamp(delta + step * sign(grad), -radius, radius)`.
pub(crate) fn pgd_step(delta: &mut [f64], grad: &[f64], step: f64, radius: f64) {
    for (d, g) in delta.iter_mut().zip(grad) {
        *d = (*d + step * sign(*g)).clamp(-radius, radius);
    }
}

/// Multi-step PGD on features, starting from `delta = 0`:
/// `delta <- proj_{|delta|_inf <= radius}(delta + step * sign(grad_f L(f_clean + delta)))`.
///
/// The returned perturbation is a plain tensor; nothing of its construction
/// is recorded on any training tape.
pub fn pgd_feature_perturb(
    head: &impl FeatureHead,
    f_clean: &Tensor,
    labels: &[usize],
    step: f64,
    steps: usize,
    radius: f64,
) -> Result<Tensor> {
    Ok(pgd_feature_trace(head, f_clean, labels, step, steps, radius)?.0)
}

/// Like [`pgd_feature_perturb`] but also returns the loss at every iterate,
/// starting with the unperturbed loss (`steps + 1` values).
pub fn pgd_feature_trace(
    head: &impl FeatureHead,
    f_clean: &Tensor,
    labels: &[usize],
    step: f64,
    steps: usize,
    radius: f64,
) -> Result<(Tensor, Vec<f64>)> {
    if steps < 1 {
        return Err(Error::domain("PGD needs at least one step"));
    }
    if !(step >= 0.0) || !(radius >= 0.0) {
        return Err(Error::domain(format!("invalid PGD step {step} or radius {radius}")));
    }
    let mut delta = Tensor::zeros(f_clean.shape());
    let mut losses = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let f = shifted(f_clean, &delta);
        let (loss, grad) = head.loss_and_grad(&f, labels)?;
        losses.push(loss);
        if t == steps {
            break;
        }
        check_finite(grad.values(), &format!("feature gradient at PGD step {t}"))?;
        pgd_step(delta.values_mut(), grad.values(), step, radius);
    }
    Ok((delta, losses))
}

/// `f + delta`.
pub fn shifted(f: &Tensor, delta: &Tensor) -> Tensor {
    let v = f.values().iter().zip(delta.values()).map(|(a, b)| a + b).collect();
    Tensor::new(f.shape().to_vec(), v).expect("same shape")
}
