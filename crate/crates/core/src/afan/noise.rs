use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// I.i.d. `N(0, std^2)` perturbation with the given shape. `std = 0` yields
/// zeros without consuming randomness.
pub fn gaussian_noise_perturb(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::domain(format!("noise standard deviation must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::domain(e.to_string()))?;
    let n = shape.iter().product();
    let values = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), values)
}
