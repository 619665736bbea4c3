use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_finite, Error, Result};
use crate::models::{BnMode, SplitModel};
use crate::par::{join, map_indexed};
use crate::seed::{rng_for, Concern};
use crate::tensor::{Tape, Tensor};

/// A scalar loss over a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.loss_grad(theta)?.0)
    }
}

/// Full-batch mean cross-entropy of a model with batch norm in evaluation
/// mode, so the loss is a fixed function of the parameters.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    model: SplitModel,
    x: Tensor,
    labels: Vec<usize>,
}

impl ModelObjective {
    pub fn new(model: &SplitModel, x: &Tensor, labels: &[usize]) -> Result<Self> {
        if labels.is_empty() || x.batch() != labels.len() {
            return Err(Error::domain("objective needs a non-empty labeled batch"));
        }
        Ok(ModelObjective {
            model: model.clone(),
            x: x.clone(),
            labels: labels.to_vec(),
        })
    }

    pub fn theta(&self) -> Vec<f64> {
        self.model.flat_params()
    }

    fn run(&self, theta: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut model = self.model.clone();
        model.set_flat_params(theta)?;
        let mut tape = Tape::new();
        let mut b = model.bind(&mut tape, BnMode::Eval, with_grad);
        let xv = tape.constant(&self.x);
        let z = model.forward(&mut tape, &mut b, xv)?;
        let loss = tape.softmax_xent(z, &self.labels)?;
        if !with_grad {
            return Ok((tape.scalar(loss), Vec::new()));
        }
        tape.backward(loss)?;
        let mut grad = Vec::with_capacity(theta.len());
        for &v in b.vars() {
            match tape.grad(v) {
                Some(g) => grad.extend_from_slice(g),
                None => grad.extend(std::iter::repeat_n(0.0, tape.value(v).len())),
            }
        }
        Ok((tape.scalar(loss), grad))
    }
}

impl Objective for ModelObjective {
    fn dim(&self) -> usize {
        self.model.param_count()
    }

    fn loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.run(theta, true)
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.run(theta, false)?.0)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Hessian-vector product by a central difference of gradients with
/// `h = 1e-4 * (1 + |theta|_inf) / |v|_inf`.
pub fn hvp(obj: &impl Objective, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != obj.dim() || v.len() != theta.len() {
        return Err(Error::Shape {
            op: "hvp",
            left: vec![obj.dim()],
            right: vec![theta.len(), v.len()],
        });
    }
    let vn = max_abs(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = 1e-4 * (1.0 + max_abs(theta)) / (vn + f64::MIN_POSITIVE);
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + h * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - h * d).collect();
    let (gp, gm) = join(|| obj.loss_grad(&plus), || obj.loss_grad(&minus));
    let (gp, gm) = (gp?.1, gm?.1);
    check_finite(&gp, "gradient at theta + h v")?;
    check_finite(&gm, "gradient at theta - h v")?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerConfig {
    pub iters: usize,
    /// Convergence threshold on `|Hv - lambda v| / |lambda|`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            iters: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralEstimate {
    /// `|lambda|` for the dominant eigenvalue.
    pub value: f64,
    /// Signed Rayleigh quotient at the last iterate.
    pub rayleigh: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub restarts: usize,
}

fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Power iteration on the Hessian, which converges to the eigenvalue of
/// largest magnitude. A zero iterate restarts from a fresh random vector.
pub fn spectral_norm(obj: &impl Objective, theta: &[f64], cfg: &PowerConfig) -> Result<SpectralEstimate> {
    if cfg.iters == 0 {
        return Err(Error::invalid("flatness.power_iters", "must be at least 1"));
    }
    let mut rng = rng_for(cfg.seed, Concern::Estimators, 0);
    let mut v = random_unit(theta.len(), &mut rng);
    let mut est = SpectralEstimate {
        value: 0.0,
        rayleigh: 0.0,
        iterations: 0,
        residual: f64::INFINITY,
        converged: false,
        restarts: 0,
    };
    for it in 1..=cfg.iters {
        est.iterations = it;
        let hv = hvp(obj, theta, &v)?;
        let n = norm(&hv);
        let lambda = dot(&v, &hv);
        est.rayleigh = lambda;
        est.value = lambda.abs();
        if n == 0.0 {
            est.residual = 0.0;
            est.restarts += 1;
            v = random_unit(theta.len(), &mut rng);
            continue;
        }
        let r: Vec<f64> = hv.iter().zip(&v).map(|(a, b)| a - lambda * b).collect();
        est.residual = norm(&r) / lambda.abs().max(f64::MIN_POSITIVE);
        if est.residual < cfg.tol {
            est.converged = true;
            break;
        }
        v = hv.into_iter().map(|x| x / n).collect();
    }
    if !est.converged {
        log::warn!(
            "power iteration stopped after {} iterations with residual {:.3e}",
            est.iterations,
            est.residual
        );
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub probes: usize,
}

/// Hutchinson estimate `mean(z' H z)` over Rademacher probes. Probe `i`
/// draws from its own seeded stream, so results do not depend on the
/// thread count.
pub fn trace_hutchinson(obj: &impl Objective, theta: &[f64], probes: usize, seed: u64) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::invalid("flatness.probes", "must be at least 1"));
    }
    let samples = map_indexed(probes, |i| {
        let mut rng = rng_for(seed, Concern::Estimators, 1 + i as u64);
        let z: Vec<f64> = (0..theta.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Ok(dot(&z, &hvp(obj, theta, &z)?))
    });
    let samples: Vec<f64> = samples.into_iter().collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if samples.len() > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        mean,
        std_error,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlatnessConfig {
    pub power: PowerConfig,
    pub probes: usize,
    /// Samples used for the loss; the first `max_samples` of the set.
    pub max_samples: usize,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        FlatnessConfig {
            power: PowerConfig::default(),
            probes: 100,
            max_samples: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlatnessReport {
    pub spectral: SpectralEstimate,
    pub trace: TraceEstimate,
    pub params: usize,
    pub samples: usize,
}

/// Spectral norm and trace of the loss Hessian at the model's parameters.
pub fn flatness(model: &SplitModel, x: &Tensor, labels: &[usize], cfg: &FlatnessConfig) -> Result<FlatnessReport> {
    let n = labels.len().min(cfg.max_samples);
    let idx: Vec<usize> = (0..n).collect();
    let obj = ModelObjective::new(model, &x.select_rows(&idx)?, &labels[..n])?;
    let theta = obj.theta();
    let spectral = spectral_norm(&obj, &theta, &cfg.power)?;
    let trace = trace_hutchinson(&obj, &theta, cfg.probes, cfg.power.seed)?;
    for (name, v) in [("spectral norm", spectral.value), ("trace", trace.mean)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} estimate"),
                index: 0,
            });
        }
    }
    Ok(FlatnessReport {
        spectral,
        trace,
        params: theta.len(),
        samples: n,
    })
}
