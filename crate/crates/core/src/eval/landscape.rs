use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::hessian::{ModelObjective, Objective};
use crate::error::{Error, Result};
use crate::models::SplitModel;
use crate::par::map_indexed;
use crate::seed::{rng_for, Concern};
use crate::tensor::Tensor;

/// Losses on a square grid in a 2-D parameter plane. `values[i * grid + j]`
/// holds the loss at `(coords[i], coords[j])` along the first and second
/// direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossSlice {
    pub grid: usize,
    pub span: f64,
    pub coords: Vec<f64>,
    pub values: Vec<f64>,
}

impl LossSlice {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid + j]
    }

    /// The unperturbed loss; only odd grids have a center cell.
    pub fn center(&self) -> Option<f64> {
        (self.grid % 2 == 1).then(|| self.at(self.grid / 2, self.grid / 2))
    }

    /// Mean second difference over interior cells along both axes, divided
    /// by the squared grid step. Non-finite stencils are skipped.
    pub fn curvature_proxy(&self) -> f64 {
        let g = self.grid;
        if g < 3 {
            return f64::NAN;
        }
        let step = self.coords[1] - self.coords[0];
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..g {
            for j in 0..g {
                if i > 0 && i + 1 < g {
                    let d = self.at(i - 1, j) - 2.0 * self.at(i, j) + self.at(i + 1, j);
                    if d.is_finite() {
                        sum += d;
                        count += 1;
                    }
                }
                if j > 0 && j + 1 < g {
                    let d = self.at(i, j - 1) - 2.0 * self.at(i, j) + self.at(i, j + 1);
                    if d.is_finite() {
                        sum += d;
                        count += 1;
                    }
                }
            }
        }
        sum / count as f64 / (step * step)
    }

    /// One grid row per line, space-separated.
    pub fn to_matrix(&self) -> String {
        let mut out = String::new();
        for i in 0..self.grid {
            let row: Vec<String> = (0..self.grid).map(|j| format!("{:e}", self.at(i, j))).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// `span * (2i - (g - 1)) / (g - 1)`: symmetric, with an exact zero at the
/// middle of odd grids.
pub fn grid_coords(grid: usize, span: f64) -> Vec<f64> {
    let g = grid as f64 - 1.0;
    (0..grid).map(|i| span * (2.0 * i as f64 - g) / g).collect()
}

/// Evaluates `obj` at `theta + a d1 + b d2` over the grid. Non-finite losses
/// are stored as they are.
pub fn loss_slice(
    obj: &impl Objective,
    theta: &[f64],
    d1: &[f64],
    d2: &[f64],
    grid: usize,
    span: f64,
) -> Result<LossSlice> {
    if grid < 2 {
        return Err(Error::invalid("landscape.grid", "must be at least 2"));
    }
    if !(span > 0.0 && span.is_finite()) {
        return Err(Error::invalid("landscape.span", "must be positive"));
    }
    if d1.len() != theta.len() || d2.len() != theta.len() {
        return Err(Error::Shape {
            op: "loss_slice",
            left: vec![theta.len()],
            right: vec![d1.len(), d2.len()],
        });
    }
    let coords = grid_coords(grid, span);
    let values = map_indexed(grid * grid, |cell| {
        let (a, b) = (coords[cell / grid], coords[cell % grid]);
        let p: Vec<f64> = theta
            .iter()
            .zip(d1.iter().zip(d2))
            .map(|(t, (x, y))| t + a * x + b * y)
            .collect();
        obj.loss(&p)
    });
    Ok(LossSlice {
        grid,
        span,
        coords,
        values: values.into_iter().collect::<Result<_>>()?,
    })
}

/// Gaussian direction rescaled filter by filter to the norm of the matching
/// parameter filter. Convolution filters are output channels and dense
/// filters are output units; vectors (biases, batch-norm scale and shift)
/// get a zero direction.
pub fn filter_normalized_direction(model: &SplitModel, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    for p in model.params() {
        let shape = p.tensor.shape();
        let vals = p.tensor.values();
        let mut d: Vec<f64> = (0..vals.len()).map(|_| rng.sample(StandardNormal)).collect();
        match shape.len() {
            0 | 1 => d.iter_mut().for_each(|x| *x = 0.0),
            2 => {
                let (rows, cols) = (shape[0], shape[1]);
                for c in 0..cols {
                    let idx = (0..rows).map(|r| r * cols + c);
                    let pn = idx.clone().map(|i| vals[i] * vals[i]).sum::<f64>().sqrt();
                    let dn = idx.clone().map(|i| d[i] * d[i]).sum::<f64>().sqrt();
                    let s = if dn > 0.0 { pn / dn } else { 0.0 };
                    idx.for_each(|i| d[i] *= s);
                }
            }
            _ => {
                let per = vals.len() / shape[0];
                for (pf, df) in vals.chunks(per).zip(d.chunks_mut(per)) {
                    let pn = pf.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dn = df.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let s = if dn > 0.0 { pn / dn } else { 0.0 };
                    df.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        out.extend(d);
    }
    out
}

/// Loss slice of a model on `(x, labels)` along two seeded filter-normalized
/// directions.
pub fn model_loss_slice(
    model: &SplitModel,
    x: &Tensor,
    labels: &[usize],
    grid: usize,
    span: f64,
    seed: u64,
) -> Result<LossSlice> {
    let obj = ModelObjective::new(model, x, labels)?;
    let mut rng = rng_for(seed, Concern::Estimators, 1 << 20);
    let d1 = filter_normalized_direction(model, &mut rng);
    let d2 = filter_normalized_direction(model, &mut rng);
    loss_slice(&obj, &obj.theta(), &d1, &d2, grid, span)
}
