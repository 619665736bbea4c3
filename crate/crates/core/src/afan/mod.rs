//! Adversarial feature augmentation over a spectrum of strengths, and
//! adversarial feature normalization.

mod dump;
mod noise;
mod pgd;
mod stats;

pub use dump::{read_feature_dump, write_feature_dump, DumpKind, DumpRecord, DUMP_MAGIC};
pub use noise::gaussian_noise_perturb;
pub use pgd::{pgd_feature_perturb, pgd_feature_trace, shifted, sign, FeatureHead};
pub use stats::{
    compute_feature_stats, feature_stats_on_tape, normalize_mix, normalize_mix_on_tape, FeatureStats, StatVars,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the `k` strengths are drawn from `(0, alpha_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// `i * alpha_max / k` for `i = 1..=k`.
    Grid,
    /// `k` uniform draws, sorted ascending.
    RandomUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Adversarial,
    /// Gaussian noise with standard deviation equal to the strength.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbConfig {
    pub steps: usize,
    /// Upper end of the strength interval, in feature units.
    pub alpha_max: f64,
    /// Projection radius.
    pub epsilon: f64,
    pub k: usize,
    pub schedule: Schedule,
    pub lambda: f64,
    pub noise_mode: NoiseMode,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            steps: 1,
            alpha_max: 0.5 / 255.0,
            epsilon: 8.0 / 255.0,
            k: 3,
            schedule: Schedule::Grid,
            lambda: 1.0,
            noise_mode: NoiseMode::Adversarial,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("afan.steps", "must be >= 1"));
        }
        if !(self.alpha_max > 0.0) {
            return Err(Error::invalid("afan.alpha_max", "must be > 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("afan.epsilon", "must be > 0"));
        }
        if self.k < 1 {
            return Err(Error::invalid("afan.k", "must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("afan.lambda", "must be >= 0"));
        }
        Ok(())
    }

    /// The strengths `eps^(1) < ... < eps^(k)`.
    pub fn strengths(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.schedule {
            Schedule::Grid => (1..=self.k)
                .map(|i| i as f64 * self.alpha_max / self.k as f64)
                .collect(),
            Schedule::RandomUniform => {
                let mut s: Vec<f64> = (0..self.k)
                    .map(|_| {
                        // (0, alpha_max]: a zero strength would duplicate the clean branch
                        let u: f64 = rng.random();
                        (1.0 - u) * self.alpha_max
                    })
                    .collect();
                s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                s
            }
        }
    }

    /// PGD step size and projection radius for one strength.
    ///
    /// One step: the strength is the step size and `epsilon` the radius.
    /// Several steps: the step size is `alpha_max / steps` and the strength
    /// (capped at `epsilon`) is the radius.
    pub fn step_and_radius(&self, strength: f64) -> (f64, f64) {
        if self.steps == 1 {
            (strength, self.epsilon)
        } else {
            (self.alpha_max / self.steps as f64, strength.min(self.epsilon))
        }
    }

    /// Whether one PGD run can be rescaled to every strength.
    pub fn can_interpolate(&self, strengths: &[f64]) -> bool {
        self.noise_mode == NoiseMode::Adversarial
            && self.steps == 1
            && strengths.iter().all(|&s| s <= self.epsilon)
    }
}

/// One augmented view of the clean features.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub strength: f64,
    pub delta: Tensor,
    pub f_adv: Tensor,
    pub f_mix: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSet {
    pub f_clean: Tensor,
    pub entries: Vec<Augmented>,
    /// True when every entry was rescaled from a single PGD-1 run.
    pub interpolated: bool,
}

impl AugmentedSet {
    /// Fills `f_mix` for every entry using moments of the whole batch.
    pub fn with_mix(mut self) -> Result<Self> {
        let clean = compute_feature_stats(&self.f_clean)?;
        for e in &mut self.entries {
            let adv = compute_feature_stats(&e.f_adv)?;
            e.f_mix = Some(normalize_mix(&self.f_clean, &clean, &adv)?);
        }
        Ok(self)
    }

    pub fn deltas(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.delta)
    }
}

/// Perturbations of `f_clean` at every configured strength.
///
/// With one PGD step and all strengths inside the projection ball, the
/// gradient sign is computed once at the first strength and every other
/// perturbation is that one rescaled by `eps^(i) / eps^(1)`. Otherwise PGD
/// runs independently per strength.
pub fn build_spectrum(
    config: &PerturbConfig,
    head: &impl FeatureHead,
    f_clean: &Tensor,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<AugmentedSet> {
    config.validate()?;
    let strengths = config.strengths(rng);
    let interpolated = config.can_interpolate(&strengths);
    if !interpolated && config.noise_mode == NoiseMode::Adversarial && config.steps == 1 {
        log::debug!("strength above epsilon {}: running PGD per strength", config.epsilon);
    }
    let deltas: Vec<Tensor> = match config.noise_mode {
        NoiseMode::Gaussian => strengths
            .iter()
            .map(|&s| gaussian_noise_perturb(f_clean.shape(), s, rng))
            .collect::<Result<_>>()?,
        NoiseMode::Adversarial if interpolated => {
            let s1 = strengths[0];
            let (step, radius) = config.step_and_radius(s1);
            let d1 = pgd_feature_perturb(head, f_clean, labels, step, 1, radius)?;
            // d1 = s1 * sign(g), so d1 / s1 recovers the sign pattern exactly
            let unit: Vec<f64> = d1.values().iter().map(|v| v / s1).collect();
            strengths
                .iter()
                .map(|&s| Tensor::new(f_clean.shape().to_vec(), unit.iter().map(|u| s * u).collect()))
                .collect::<Result<_>>()?
        }
        NoiseMode::Adversarial => strengths
            .iter()
            .map(|&s| {
                let (step, radius) = config.step_and_radius(s);
                pgd_feature_perturb(head, f_clean, labels, step, config.steps, radius)
            })
            .collect::<Result<_>>()?,
    };
    let entries = strengths
        .into_iter()
        .zip(deltas)
        .map(|(strength, delta)| Augmented {
            strength,
            f_adv: shifted(f_clean, &delta),
            delta,
            f_mix: None,
        })
        .collect();
    Ok(AugmentedSet {
        f_clean: f_clean.clone(),
        entries,
        interpolated,
    })
}
