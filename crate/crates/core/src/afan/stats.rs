use crate::error::{Error, Result};
use crate::models::BN_EPS;
use crate::tensor::{Tape, Tensor, Var};

/// Per-channel first and second moments of a feature batch, as computed in
/// batch normalization. `sigma` includes the variance floor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Channel statistics recorded on a tape so gradients reach the features.
#[derive(Debug, Clone, Copy)]
pub struct StatVars {
    pub mu: Var,
    pub sigma: Var,
}

impl StatVars {
    pub fn values(&self, tape: &Tape) -> FeatureStats {
        FeatureStats {
            mu: tape.tensor(self.mu),
            sigma: tape.tensor(self.sigma),
        }
    }
}

/// Differentiable per-channel mean and `sqrt(var + 1e-5)` over batch and
/// spatial axes.
pub fn feature_stats_on_tape(tape: &mut Tape, f: Var) -> Result<StatVars> {
    Ok(StatVars {
        mu: tape.channel_mean(f)?,
        sigma: tape.channel_std(f, BN_EPS)?,
    })
}

pub fn compute_feature_stats(f: &Tensor) -> Result<FeatureStats> {
    let mut tape = Tape::new();
    let fv = tape.constant(f);
    Ok(feature_stats_on_tape(&mut tape, fv)?.values(&tape))
}

/// Re-standardizes `f` from the clean moments to the adversarial ones:
/// `sigma_adv * (f - mu_clean) / sigma_clean + mu_adv`.
///
/// Evaluated as `f * r + (mu_adv - mu_clean * r)` with
/// `r = sigma_adv / sigma_clean`, which returns `f` bit-for-bit when both
/// statistics are equal.
pub fn normalize_mix_on_tape(tape: &mut Tape, f: Var, clean: StatVars, adv: StatVars) -> Result<Var> {
    for s in [clean.sigma, adv.sigma] {
        if let Some(i) = tape.value(s).iter().position(|v| !(*v > 0.0)) {
            return Err(Error::domain(format!("non-positive sigma in channel {i}")));
        }
    }
    let ratio = tape.div(adv.sigma, clean.sigma)?;
    let moved = tape.mul(clean.mu, ratio)?;
    let shift = tape.sub(adv.mu, moved)?;
    let scaled = tape.mul_channel(f, ratio)?;
    tape.add_channel(scaled, shift)
}

pub fn normalize_mix(f_clean: &Tensor, clean: &FeatureStats, adv: &FeatureStats) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(f_clean);
    let c = StatVars {
        mu: tape.constant(&clean.mu),
        sigma: tape.constant(&clean.sigma),
    };
    let a = StatVars {
        mu: tape.constant(&adv.mu),
        sigma: tape.constant(&adv.sigma),
    };
    let out = normalize_mix_on_tape(&mut tape, f, c, a)?;
    Ok(tape.tensor(out))
}
