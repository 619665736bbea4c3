//! Split networks: a backbone that produces features at a named split point
//! and a head that maps those features to logits.

mod checkpoint;
mod spec;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{Architecture, ModelSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{BatchMoments, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which statistics batch-norm layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// A named tensor owned by a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Stage the parameter belongs to.
    pub stage: usize,
}

#[derive(Debug, Clone)]
enum Layer {
    Dense { weight: usize, bias: usize },
    Conv { weight: usize, stride: usize, pad: usize },
    BatchNorm { gamma: usize, beta: usize, running: usize },
    Relu,
    /// `relu(body(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
    Pool,
}

#[derive(Debug, Clone)]
struct Stage {
    layers: Vec<Layer>,
}

/// Parameters of one model recorded on a tape, plus the batch-norm mode and
/// the batch moments observed while running in training mode.
#[derive(Debug)]
pub struct Binding {
    vars: Vec<Var>,
    pub mode: BnMode,
    moments: Vec<(usize, BatchMoments)>,
}

impl Binding {
    /// Wraps variables already recorded on a tape, one per model parameter
    /// in declaration order.
    pub fn from_vars(vars: Vec<Var>, mode: BnMode) -> Self {
        Binding {
            vars,
            mode,
            moments: Vec::new(),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Batch moments recorded so far, in layer order.
    pub fn moments(&self) -> &[(usize, BatchMoments)] {
        &self.moments
    }

    pub fn take_moments(&mut self) -> Vec<(usize, BatchMoments)> {
        std::mem::take(&mut self.moments)
    }
}

/// Output of the head: mean cross-entropy and the logits it was computed from.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub loss: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct SplitModel {
    spec: ModelSpec,
    stages: Vec<Stage>,
    params: Vec<Param>,
    /// Running mean/variance per batch-norm layer.
    running: Vec<(Param, Param)>,
    split_points: Vec<String>,
    /// Index into `split_points`.
    active: usize,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Param>,
    running: Vec<(Param, Param)>,
    stage: usize,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), values).expect("shape matches"))
    }

    fn add(&mut self, name: String, tensor: Tensor) -> usize {
        self.params.push(Param {
            name,
            tensor: tensor.with_grad(),
            stage: self.stage,
        });
        self.params.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) -> Layer {
        let weight = self.normal(format!("{prefix}.weight"), &[fan_in, fan_out], (gain / fan_in as f64).sqrt());
        let bias = self.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
        Layer::Dense { weight, bias }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Layer {
        let fan_in = cin * k * k;
        let weight = self.normal(format!("{prefix}.weight"), &[cout, cin, k, k], (2.0 / fan_in as f64).sqrt());
        Layer::Conv {
            weight,
            stride,
            pad: k / 2,
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Layer {
        let gamma = self.add(format!("{prefix}.gamma"), Tensor::filled(&[c], 1.0));
        let beta = self.add(format!("{prefix}.beta"), Tensor::zeros(&[c]));
        let mk = |name: String, t: Tensor, stage| Param { name, tensor: t, stage };
        self.running.push((
            mk(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), self.stage),
            mk(format!("{prefix}.running_var"), Tensor::filled(&[c], 1.0), self.stage),
        ));
        Layer::BatchNorm {
            gamma,
            beta,
            running: self.running.len() - 1,
        }
    }
}

impl SplitModel {
    /// Builds a model with fan-in scaled normal initialization; identical
    /// seeds give identical parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            running: Vec::new(),
            stage: 0,
        };
        let mut stages = Vec::new();
        match &spec.arch {
            Architecture::Mlp { input_dim, hidden } => {
                let mut fan_in = *input_dim;
                for (i, &w) in hidden.iter().enumerate() {
                    b.stage = stages.len();
                    let p = format!("layer{}", i + 1);
                    let dense = b.dense(&format!("{p}.dense"), fan_in, w, 2.0);
                    let bn = b.bn(&format!("{p}.bn"), w);
                    stages.push(Stage {
                        layers: vec![dense, bn, Layer::Relu],
                    });
                    fan_in = w;
                }
                b.stage = stages.len();
                let fc = b.dense("fc", fan_in, spec.classes, 1.0);
                stages.push(Stage { layers: vec![fc] });
            }
            Architecture::TinyResnet { input, channels } => {
                // stage 0: stem, stages 1..=B: residual blocks, last: classifier
                let stem = b.conv("stem.conv", input[0], channels[0], 3, 1);
                let stem_bn = b.bn("stem.bn", channels[0]);
                stages.push(Stage {
                    layers: vec![stem, stem_bn, Layer::Relu],
                });
                let mut cin = channels[0];
                for (i, &c) in channels.iter().enumerate() {
                    b.stage = stages.len();
                    let p = format!("block{}", i + 1);
                    let stride = if i == 0 { 1 } else { 2 };
                    let body = vec![
                        b.conv(&format!("{p}.conv1"), cin, c, 3, stride),
                        b.bn(&format!("{p}.bn1"), c),
                        Layer::Relu,
                        b.conv(&format!("{p}.conv2"), c, c, 3, 1),
                        b.bn(&format!("{p}.bn2"), c),
                    ];
                    let shortcut = if stride != 1 || cin != c {
                        vec![
                            b.conv(&format!("{p}.shortcut"), cin, c, 1, stride),
                            b.bn(&format!("{p}.shortcut_bn"), c),
                        ]
                    } else {
                        Vec::new()
                    };
                    stages.push(Stage {
                        layers: vec![Layer::Residual { body, shortcut }],
                    });
                    cin = c;
                }
                b.stage = stages.len();
                let fc = b.dense("fc", cin, spec.classes, 1.0);
                stages.push(Stage {
                    layers: vec![Layer::Pool, fc],
                });
            }
        }
        let (params, running) = (b.params, b.running);
        let split_points = spec.split_points();
        let active = match &spec.split {
            Some(s) => split_points.iter().position(|p| p == s).expect("validated"),
            None => split_points.len() - 1,
        };
        Ok(SplitModel {
            spec: spec.clone(),
            stages,
            params,
            running,
            split_points,
            active,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn split_points(&self) -> &[String] {
        &self.split_points
    }

    pub fn active_split(&self) -> &str {
        &self.split_points[self.active]
    }

    pub fn set_active_split(&mut self, name: &str) -> Result<()> {
        self.active = self
            .split_points
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::invalid("model.split", format!("unknown split point {name:?}")))?;
        self.spec.split = Some(name.to_string());
        Ok(())
    }

    /// Index one past the last backbone stage.
    fn split_stage(&self) -> usize {
        match self.spec.arch {
            // stage i ends at layer{i+1}
            Architecture::Mlp { .. } => self.active + 1,
            // stem is stage 0, block{i+1} is stage i+1
            Architecture::TinyResnet { .. } => self.active + 2,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn backbone_params(&self) -> impl Iterator<Item = &Param> {
        let s = self.split_stage();
        self.params.iter().filter(move |p| p.stage < s)
    }

    pub fn head_params(&self) -> impl Iterator<Item = &Param> {
        let s = self.split_stage();
        self.params.iter().filter(move |p| p.stage >= s)
    }

    /// Batch-norm running statistics as `(mean, var)` pairs.
    pub fn running_stats(&self) -> &[(Param, Param)] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [(Param, Param)] {
        &mut self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// All trainable values concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.tensor.values());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                op: "set_flat_params",
                left: vec![self.param_count()],
                right: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Gradients stored on the parameters, concatenated like [`flat_params`].
    ///
    /// [`flat_params`]: SplitModel::flat_params
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            match &p.tensor.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.tensor.len())),
            }
        }
        out
    }

    /// Records every parameter on `tape`. With `trainable = false` they are
    /// constants (used by attacks and evaluation).
    pub fn bind(&self, tape: &mut Tape, mode: BnMode, trainable: bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.variable(&p.tensor) } else { tape.constant(&p.tensor) })
            .collect();
        Binding {
            vars,
            mode,
            moments: Vec::new(),
        }
    }

    /// Copies tape gradients into each parameter's `grad` buffer.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            tape.write_grad(v, &mut p.tensor, crate::tensor::GradMode::Reset);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Folds recorded batch moments into the running statistics.
    pub fn update_running_stats(&mut self, moments: &[(usize, BatchMoments)]) {
        for (idx, m) in moments {
            let (mean, var) = &mut self.running[*idx];
            let unbias = m.count as f64 / (m.count as f64 - 1.0).max(1.0);
            for (r, v) in mean.tensor.values_mut().iter_mut().zip(&m.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            for (r, v) in var.tensor.values_mut().iter_mut().zip(&m.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let expected = self.spec.input_shape();
        if s.len() != expected.len() + 1 || s[1..] != expected[..] {
            let mut want = vec![s.first().copied().unwrap_or(0)];
            want.extend(expected);
            return Err(Error::Shape {
                op: "model input",
                left: s.to_vec(),
                right: want,
            });
        }
        Ok(())
    }

    fn run_layers(&self, layers: &[Layer], tape: &mut Tape, b: &mut Binding, mut x: Var) -> Result<Var> {
        for layer in layers {
            x = match layer {
                Layer::Dense { weight, bias } => {
                    let y = tape.matmul(x, b.vars[*weight])?;
                    tape.add_channel(y, b.vars[*bias])?
                }
                Layer::Conv { weight, stride, pad } => tape.conv2d(x, b.vars[*weight], *stride, *pad)?,
                Layer::BatchNorm { gamma, beta, running } => {
                    let (g, bt) = (b.vars[*gamma], b.vars[*beta]);
                    match b.mode {
                        BnMode::Train => {
                            let (y, m) = tape.batch_norm(x, g, bt, BN_EPS)?;
                            b.moments.push((*running, m));
                            y
                        }
                        BnMode::Eval => {
                            let (rm, rv) = &self.running[*running];
                            let inv: Vec<f64> = rv.tensor.values().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                            let rm = tape.constant(&rm.tensor);
                            let inv = tape.constant(&Tensor::vector(inv));
                            let y = tape.sub_channel(x, rm)?;
                            let y = tape.mul_channel(y, inv)?;
                            let y = tape.mul_channel(y, g)?;
                            tape.add_channel(y, bt)?
                        }
                    }
                }
                Layer::Relu => tape.relu(x),
                Layer::Residual { body, shortcut } => {
                    let main = self.run_layers(body, tape, b, x)?;
                    let skip = self.run_layers(shortcut, tape, b, x)?;
                    let s = tape.add(main, skip)?;
                    tape.relu(s)
                }
                Layer::Pool => tape.spatial_mean(x)?,
            };
        }
        Ok(x)
    }

    fn run_stages(&self, range: std::ops::Range<usize>, tape: &mut Tape, b: &mut Binding, mut x: Var) -> Result<Var> {
        for s in range {
            x = self.run_layers(&self.stages[s].layers, tape, b, x)?;
        }
        Ok(x)
    }

    /// Features at the active split point (`f(x, theta_b)`).
    pub fn forward_backbone(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        self.run_stages(0..self.split_stage(), tape, b, x)
    }

    /// Logits computed from split-point features.
    pub fn head_logits(&self, tape: &mut Tape, b: &mut Binding, f: Var) -> Result<Var> {
        let expected = self.feature_shape(tape.shape(f).first().copied().unwrap_or(0));
        if tape.shape(f) != expected.as_slice() {
            return Err(Error::Shape {
                op: "head input",
                left: tape.shape(f).to_vec(),
                right: expected,
            });
        }
        self.run_stages(self.split_stage()..self.stages.len(), tape, b, f)
    }

    /// Head logits and their mean cross-entropy against `labels`.
    pub fn forward_head(&self, tape: &mut Tape, b: &mut Binding, f: Var, labels: &[usize]) -> Result<HeadOutput> {
        let logits = self.head_logits(tape, b, f)?;
        let loss = tape.softmax_xent(logits, labels)?;
        Ok(HeadOutput { loss, logits })
    }

    /// Monolithic forward through every stage.
    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        self.run_stages(0..self.stages.len(), tape, b, x)
    }

    /// Shape of split-point features for a batch of `n`.
    pub fn feature_shape(&self, n: usize) -> Vec<usize> {
        match &self.spec.arch {
            Architecture::Mlp { hidden, .. } => vec![n, hidden[self.active]],
            Architecture::TinyResnet { input, channels } => {
                let mut h = input[1];
                let mut w = input[2];
                for _ in 0..self.active {
                    h = (h + 2 - 3) / 2 + 1;
                    w = (w + 2 - 3) / 2 + 1;
                }
                vec![n, channels[self.active], h, w]
            }
        }
    }

    /// Evaluation-mode logits for a batch of inputs.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.bind(&mut tape, BnMode::Eval, false);
        let xv = tape.constant(x);
        let z = self.forward(&mut tape, &mut b, xv)?;
        Ok(tape.tensor(z))
    }
}

/// Largest relative finite-difference error of the training-mode loss
/// gradient with respect to every parameter of `model`.
pub fn param_grad_check(model: &SplitModel, x: &Tensor, labels: &[usize], h: f64) -> Result<f64> {
    let points: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    crate::tensor::grad_check_many(
        |tape, vars| {
            let mut b = Binding::from_vars(vars.to_vec(), BnMode::Train);
            let xv = tape.constant(x);
            let f = model.forward_backbone(tape, &mut b, xv)?;
            Ok(model.forward_head(tape, &mut b, f, labels)?.loss)
        },
        &points,
        h,
    )
}

/// Row-wise argmax of `[N,K]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .values()
        .chunks(k)
        .map(|r| {
            let mut best = 0;
            for j in 1..k {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
