//! The combined clean + adversarial-feature objective and the SGD loop
//! around it.

mod record;
mod schedule;
mod sgd;

pub use record::{write_records, RunRecord};
pub use schedule::{lr_at, LrSchedule};
pub use sgd::{sgd_update, Sgd};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use crate::afan::{build_spectrum, feature_stats_on_tape, normalize_mix_on_tape, PerturbConfig};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, Binding, BnMode, SplitModel};
use crate::seed::{rng_for, Concern};
use crate::tensor::{BatchMoments, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    /// Epochs after which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    /// `0` trains for all epochs; the best epoch is retained either way.
    pub patience: usize,
    pub perturb: PerturbConfig,
    pub afa_on: bool,
    /// Ignored when `afa_on` is false.
    pub afn_on: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            warmup_iters: 200,
            milestones: vec![50, 150],
            decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            patience: 0,
            perturb: PerturbConfig::default(),
            afa_on: true,
            afn_on: true,
        }
    }
}

impl TrainConfig {
    /// Plain SGD on the clean loss.
    pub fn baseline() -> Self {
        TrainConfig {
            afa_on: false,
            afn_on: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("train.batch_size", "must be at least 2"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("train.lr", "must be finite and non-negative"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("train.decay", "must be in (0, 1]"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::invalid("train.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("train.weight_decay", "must be finite and non-negative"));
        }
        self.perturb.validate()
    }

    pub fn schedule(&self, iters_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_iters: self.warmup_iters,
            milestones: self.milestones.clone(),
            decay: self.decay,
            iters_per_epoch,
        }
    }
}

/// Where the feature perturbations come from.
pub enum Deltas<'a> {
    /// Built from the current model with [`build_spectrum`].
    Spectrum(&'a mut ChaCha8Rng),
    /// Supplied by the caller, one tensor per strength.
    Fixed { strengths: &'a [f64], deltas: &'a [Tensor] },
}

/// Tape handles for one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveVars {
    pub total: Var,
    pub clean: Var,
    pub adv: Vec<Var>,
    pub logits: Var,
    pub strengths: Vec<f64>,
    pub deltas: Vec<Tensor>,
    /// Batch-norm moments from the clean pass only.
    pub clean_moments: Vec<(usize, BatchMoments)>,
}

/// Records `L_clean + lambda * sum_i L_adv(i)` on `tape`.
///
/// The clean forward runs first. Each perturbation enters the graph as a
/// constant, so no gradient reaches its construction; the mixing moments
/// stay differentiable through `f_clean`.
pub fn afan_objective(
    model: &SplitModel,
    tape: &mut Tape,
    binding: &mut Binding,
    x: Var,
    labels: &[usize],
    config: &TrainConfig,
    source: Deltas<'_>,
) -> Result<ObjectiveVars> {
    let f = model.forward_backbone(tape, binding, x)?;
    let clean = model.forward_head(tape, binding, f, labels)?;
    let clean_moments = binding.take_moments();
    let mut out = ObjectiveVars {
        total: clean.loss,
        clean: clean.loss,
        adv: Vec::new(),
        logits: clean.logits,
        strengths: Vec::new(),
        deltas: Vec::new(),
        clean_moments,
    };
    if !config.afa_on {
        return Ok(out);
    }

    let (strengths, deltas) = match source {
        Deltas::Spectrum(rng) => {
            let set = build_spectrum(&config.perturb, model, &tape.tensor(f), labels, rng)?;
            set.entries.into_iter().map(|e| (e.strength, e.delta)).unzip()
        }
        Deltas::Fixed { strengths, deltas } => {
            if strengths.len() != deltas.len() {
                return Err(Error::Shape {
                    op: "fixed deltas",
                    left: vec![strengths.len()],
                    right: vec![deltas.len()],
                });
            }
            (strengths.to_vec(), deltas.to_vec())
        }
    };

    let clean_stats = if config.afn_on { Some(feature_stats_on_tape(tape, f)?) } else { None };
    let mut sum: Option<Var> = None;
    for delta in &deltas {
        let d = tape.constant(delta);
        let f_adv = tape.add(f, d)?;
        let input = match clean_stats {
            Some(cs) => {
                let adv_stats = feature_stats_on_tape(tape, f_adv)?;
                normalize_mix_on_tape(tape, f, cs, adv_stats)?
            }
            None => f_adv,
        };
        let head = model.forward_head(tape, binding, input, labels)?;
        binding.take_moments();
        out.adv.push(head.loss);
        sum = Some(match sum {
            Some(s) => tape.add(s, head.loss)?,
            None => head.loss,
        });
    }
    if let Some(s) = sum {
        let weighted = tape.scale(s, config.perturb.lambda);
        out.total = tape.add(clean.loss, weighted)?;
    }
    out.strengths = strengths;
    out.deltas = deltas;
    Ok(out)
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub l_clean: f64,
    pub l_adv: Vec<f64>,
    pub total: f64,
    pub correct: usize,
    pub count: usize,
}

impl LossParts {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// A recorded objective with its tape, ready for `backward`.
pub struct AfanLoss {
    pub tape: Tape,
    pub binding: Binding,
    pub vars: ObjectiveVars,
    pub parts: LossParts,
}

/// Evaluates the objective on one batch with training-mode batch norm.
pub fn afan_loss(
    model: &SplitModel,
    x: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AfanLoss> {
    if labels.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let mut tape = Tape::new();
    let mut binding = model.bind(&mut tape, BnMode::Train, true);
    let xv = tape.constant(x);
    let vars = afan_objective(model, &mut tape, &mut binding, xv, labels, config, Deltas::Spectrum(rng))?;
    let pred = argmax_rows(&tape.tensor(vars.logits));
    let parts = LossParts {
        l_clean: tape.scalar(vars.clean),
        l_adv: vars.adv.iter().map(|&v| tape.scalar(v)).collect(),
        total: tape.scalar(vars.total),
        correct: pred.iter().zip(labels).filter(|(p, y)| p == y).count(),
        count: labels.len(),
    };
    Ok(AfanLoss {
        tape,
        binding,
        vars,
        parts,
    })
}

/// Backpropagates a recorded objective, folds the clean batch moments into
/// the running statistics, and applies one SGD update.
pub fn apply_step(model: &mut SplitModel, sgd: &mut Sgd, mut loss: AfanLoss, lr: f64) -> Result<LossParts> {
    loss.tape.backward(loss.vars.total)?;
    model.collect_grads(&loss.tape, &loss.binding);
    model.update_running_stats(&loss.vars.clean_moments);
    sgd.step(model.params_mut(), lr)?;
    Ok(loss.parts)
}

/// Sample order for one epoch: a seeded permutation of `0..n`.
pub fn batch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, Concern::Shuffle, epoch as u64));
    order
}

/// Splits an epoch order into mini-batches. A trailing batch smaller than
/// 2 is dropped because batch statistics need two samples.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2).collect()
}

/// Fraction of correct eval-mode predictions.
pub fn accuracy(model: &SplitModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("accuracy of an empty set"));
    }
    let pred = argmax_rows(&model.predict_logits(x)?);
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Inputs and labels for training, plus an optional validation split.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
    pub val_x: Option<&'a Tensor>,
    pub val_y: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy, or the
    /// final ones without a validation split.
    pub model: SplitModel,
    pub best_epoch: usize,
    pub records: Vec<RunRecord>,
    pub epochs: Vec<EpochSummary>,
}

pub fn train(model: SplitModel, data: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, config, |_| Ok(()))
}

/// Trains `model`, handing every record to `sink` as it is produced.
pub fn train_with(
    mut model: SplitModel,
    data: TrainData<'_>,
    config: &TrainConfig,
    mut sink: impl FnMut(&RunRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = data.y.len();
    if n == 0 {
        return Err(Error::domain("training set is empty"));
    }
    if data.x.batch() != n {
        return Err(Error::Shape {
            op: "training data",
            left: data.x.shape().to_vec(),
            right: vec![n],
        });
    }
    if n < 2 {
        return Err(Error::domain("training set needs at least 2 samples"));
    }
    let iters_per_epoch = batches(&(0..n).collect::<Vec<_>>(), config.batch_size).len();
    let schedule = config.schedule(iters_per_epoch);
    let mut sgd = Sgd::new(model.params(), config.momentum, config.weight_decay);
    let mut noise = rng_for(config.seed, Concern::Noise, 0);
    let start = Instant::now();

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut best: Option<(f64, usize, SplitModel)> = None;
    let mut iteration = 0usize;
    for epoch in 0..config.epochs {
        let order = batch_order(n, config.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut seen = 0usize;
        for idx in batches(&order, config.batch_size) {
            let xb = data.x.select_rows(idx)?;
            let yb: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let lr = lr_at(iteration, &schedule);
            let loss = afan_loss(&model, &xb, &yb, config, &mut noise)?;
            if !loss.parts.total.is_finite() {
                let last = iteration.checked_sub(1).map_or("none".to_string(), |i| i.to_string());
                return Err(Error::NonFinite {
                    context: format!("training loss at iteration {iteration} (last good iteration {last})"),
                    index: iteration,
                });
            }
            let parts = apply_step(&mut model, &mut sgd, loss, lr)?;
            let record = RunRecord::new(iteration, epoch, lr, config.perturb.lambda, &parts, start.elapsed().as_secs_f64());
            sink(&record)?;
            records.push(record);
            loss_sum += parts.total * parts.count as f64;
            correct += parts.correct;
            seen += parts.count;
            iteration += 1;
        }
        let val_acc = match data.val_x {
            Some(vx) if !data.val_y.is_empty() => Some(accuracy(&model, vx, data.val_y)?),
            _ => None,
        };
        summaries.push(EpochSummary {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
        });
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
            if config.patience > 0 && epoch - best_epoch >= config.patience {
                log::info!("early stop at epoch {epoch}, best epoch {best_epoch}");
                break;
            }
        }
    }
    let last_epoch = summaries.last().map_or(0, |s| s.epoch);
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, last_epoch),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        records,
        epochs: summaries,
    })
}
