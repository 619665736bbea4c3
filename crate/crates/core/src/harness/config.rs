use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::afan::{NoiseMode, PerturbConfig, Schedule};
use crate::error::{Error, Result};
use crate::eval::{AttackConfig, FlatnessConfig, PowerConfig};
use crate::models::ModelSpec;
use crate::seed::{derive, Concern};
use crate::trainer::TrainConfig;

use super::data::{ExternalFormat, SyntheticKind};

/// Environment variable naming the directory relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "AFAN_OUTPUT_ROOT";

/// Ordered `key = value` pairs. Later assignments replace earlier ones in
/// place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    /// `#` starts a comment line; blank lines are ignored.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = KvConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: source.to_string(),
                location: format!("line {}", i + 1),
                reason: "expected key = value".into(),
            })?;
            cfg.set(k.trim(), v.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        match assignment.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                self.set(k.trim(), v.trim());
                Ok(())
            }
            _ => Err(Error::Usage(format!("override {assignment:?} is not key=value"))),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        classes: usize,
        noise: f64,
    },
    External {
        path: PathBuf,
        format: ExternalFormat,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Attack radii for the robust-accuracy sweep.
    pub epsilons: Vec<f64>,
    /// Checkpoint to evaluate; defaults to the run's own checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub flatness: bool,
    /// Number of evaluated samples whose clean, adversarial and mixed
    /// features are written to `features.afd`; 0 disables the dump.
    pub dump_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeConfig {
    pub grid: usize,
    pub span: f64,
    pub max_samples: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// A named set of overrides applied on top of the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub seeds: usize,
    pub cells: Vec<AblationCell>,
    /// Also estimate Hessian flatness for every run.
    pub flatness: bool,
}

fn default_cells() -> Vec<AblationCell> {
    let cell = |name: &str, afa: &str, afn: &str| AblationCell {
        name: name.to_string(),
        overrides: vec![("train.afa".into(), afa.into()), ("train.afn".into(), afn.into())],
    };
    vec![
        cell("baseline", "false", "false"),
        cell("afa", "true", "false"),
        cell("afa+afn", "true", "true"),
    ]
}

/// Everything one command needs, resolved from defaults and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub flatness: FlatnessConfig,
    pub landscape: LandscapeConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig {
                source: DataSource::Synthetic {
                    kind: SyntheticKind::Blobs,
                    n: 600,
                    classes: 2,
                    noise: SyntheticKind::Blobs.default_noise(),
                },
                test_fraction: 0.2,
                val_fraction: 0.1,
            },
            model: ModelSpec::mlp(2, &[16, 16], 2),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig {
                epsilons: vec![0.0, 4.0 / 255.0, 8.0 / 255.0],
                checkpoint: None,
                flatness: false,
                dump_features: 0,
            },
            flatness: FlatnessConfig::default(),
            landscape: LandscapeConfig {
                grid: 21,
                span: 1.0,
                max_samples: 256,
                checkpoints: Vec::new(),
            },
            ablate: AblateConfig {
                seeds: 5,
                cells: default_cells(),
                flatness: false,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| Error::invalid(key, format!("{v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::invalid(key, format!("{v:?} is not a boolean"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Defaults overlaid with `kv`. Unknown keys are usage errors.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let model_keys: Vec<(&str, &str)> = kv
            .entries()
            .iter()
            .filter(|(k, _)| k.starts_with("model."))
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        if !model_keys.is_empty() {
            let mut pairs = c.model.to_kv();
            for (k, v) in &model_keys {
                match pairs.iter_mut().find(|(pk, _)| pk == k) {
                    Some(p) => p.1 = v.to_string(),
                    None => pairs.push((k.to_string(), v.to_string())),
                }
            }
            c.model = ModelSpec::from_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        }

        let mut kind = None;
        let mut n = None;
        let mut classes = None;
        let mut noise = None;
        let mut path = None;
        let mut format = None;
        let mut cells = Vec::new();
        for (k, v) in kv.entries() {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => c.seed = parse(k, v)?,
                "output.dir" => c.output_dir = PathBuf::from(v),
                "data.kind" => kind = Some(v.parse::<SyntheticKind>()?),
                "data.n" => n = Some(parse(k, v)?),
                "data.classes" => classes = Some(parse(k, v)?),
                "data.noise" => noise = Some(parse(k, v)?),
                "data.path" => path = (!v.is_empty()).then(|| PathBuf::from(v)),
                "data.format" => format = Some(v.parse::<ExternalFormat>()?),
                "data.test_fraction" => c.data.test_fraction = parse(k, v)?,
                "data.val_fraction" => c.data.val_fraction = parse(k, v)?,
                "train.epochs" => c.train.epochs = parse(k, v)?,
                "train.batch_size" => c.train.batch_size = parse(k, v)?,
                "train.lr" => c.train.lr = parse(k, v)?,
                "train.warmup_iters" => c.train.warmup_iters = parse(k, v)?,
                "train.milestones" => c.train.milestones = parse_list(k, v)?,
                "train.decay" => c.train.decay = parse(k, v)?,
                "train.momentum" => c.train.momentum = parse(k, v)?,
                "train.weight_decay" => c.train.weight_decay = parse(k, v)?,
                "train.patience" => c.train.patience = parse(k, v)?,
                "train.afa" => c.train.afa_on = parse_bool(k, v)?,
                "train.afn" => c.train.afn_on = parse_bool(k, v)?,
                "afan.steps" => c.train.perturb.steps = parse(k, v)?,
                "afan.alpha_max" => c.train.perturb.alpha_max = parse(k, v)?,
                "afan.epsilon" => c.train.perturb.epsilon = parse(k, v)?,
                "afan.k" => c.train.perturb.k = parse(k, v)?,
                "afan.lambda" => c.train.perturb.lambda = parse(k, v)?,
                "afan.schedule" => {
                    c.train.perturb.schedule = match v {
                        "grid" => Schedule::Grid,
                        "random" => Schedule::RandomUniform,
                        _ => return Err(Error::invalid(k, format!("{v:?} (expected grid or random)"))),
                    }
                }
                "afan.noise" => {
                    c.train.perturb.noise_mode = match v {
                        "adversarial" => NoiseMode::Adversarial,
                        "gaussian" => NoiseMode::Gaussian,
                        _ => return Err(Error::invalid(k, format!("{v:?} (expected adversarial or gaussian)"))),
                    }
                }
                "attack.steps" => c.attack.steps = parse(k, v)?,
                "attack.alpha" => c.attack.alpha = parse(k, v)?,
                "attack.epsilon" => c.attack.epsilon = parse(k, v)?,
                "attack.clamp_min" => c.attack.clamp.0 = parse(k, v)?,
                "attack.clamp_max" => c.attack.clamp.1 = parse(k, v)?,
                "eval.epsilons" => c.eval.epsilons = parse_list(k, v)?,
                "eval.checkpoint" => c.eval.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
                "eval.flatness" => c.eval.flatness = parse_bool(k, v)?,
                "eval.dump_features" => c.eval.dump_features = parse(k, v)?,
                "flatness.power_iters" => c.flatness.power.iters = parse(k, v)?,
                "flatness.tol" => c.flatness.power.tol = parse(k, v)?,
                "flatness.probes" => c.flatness.probes = parse(k, v)?,
                "flatness.max_samples" => c.flatness.max_samples = parse(k, v)?,
                "landscape.grid" => c.landscape.grid = parse(k, v)?,
                "landscape.span" => c.landscape.span = parse(k, v)?,
                "landscape.max_samples" => c.landscape.max_samples = parse(k, v)?,
                "landscape.checkpoints" => {
                    c.landscape.checkpoints = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(PathBuf::from)
                        .collect()
                }
                "ablate.seeds" => c.ablate.seeds = parse(k, v)?,
                "ablate.flatness" => c.ablate.flatness = parse_bool(k, v)?,
                _ if k.starts_with("ablate.cell.") => cells.push(parse_cell(k, v)?),
                _ if k.starts_with("model.") => {}
                _ => return Err(Error::Usage(format!("unknown config key {k:?}"))),
            }
        }
        if !cells.is_empty() {
            c.ablate.cells = cells;
        }

        c.data.source = match (path, kind) {
            (Some(path), _) => DataSource::External {
                path,
                format: format.unwrap_or(ExternalFormat::CsvVectors),
            },
            (None, kind) => {
                let (dk, dn, dc, dnoise) = match &c.data.source {
                    DataSource::Synthetic {
                        kind,
                        n,
                        classes,
                        noise,
                    } => (*kind, *n, *classes, *noise),
                    DataSource::External { .. } => unreachable!("defaults are synthetic"),
                };
                let kind = kind.unwrap_or(dk);
                let changed = kind != dk;
                DataSource::Synthetic {
                    kind,
                    n: n.unwrap_or(dn),
                    classes: classes.unwrap_or(if changed { kind.default_classes() } else { dc }),
                    noise: noise.unwrap_or(if changed { kind.default_noise() } else { dnoise }),
                }
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse_with_overrides(text: &str, source: &str, overrides: &[String]) -> Result<Self> {
        let mut kv = KvConfig::parse(text, source)?;
        for o in overrides {
            kv.apply_override(o)?;
        }
        Self::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        if let DataSource::Synthetic { kind, classes, .. } = &self.data.source {
            if self.model.input_shape() != kind.input_shape() {
                return Err(Error::invalid(
                    "model.input",
                    format!("{kind} inputs have shape {:?}", kind.input_shape()),
                ));
            }
            if self.model.classes != *classes {
                return Err(Error::invalid("model.classes", format!("dataset has {classes} classes")));
            }
        }
        if self.eval.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::invalid("eval.epsilons", "radii must be non-negative"));
        }
        if self.landscape.grid < 2 {
            return Err(Error::invalid("landscape.grid", "must be at least 2"));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::invalid("ablate.seeds", "must be at least 1"));
        }
        if self.flatness.probes == 0 || self.flatness.power.iters == 0 {
            return Err(Error::invalid("flatness", "probes and power_iters must be at least 1"));
        }
        Ok(())
    }

    /// Every setting as `key = value` pairs in a fixed order; parsing them
    /// back yields an equal config.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push("output.dir", self.output_dir.display().to_string());
        match &self.data.source {
            DataSource::Synthetic {
                kind,
                n,
                classes,
                noise,
            } => {
                push("data.kind", kind.to_string());
                push("data.n", n.to_string());
                push("data.classes", classes.to_string());
                push("data.noise", noise.to_string());
            }
            DataSource::External { path, format } => {
                push("data.path", path.display().to_string());
                push("data.format", format.to_string());
            }
        }
        push("data.test_fraction", self.data.test_fraction.to_string());
        push("data.val_fraction", self.data.val_fraction.to_string());
        for (k, v) in self.model.to_kv() {
            push(&k, v);
        }
        let t = &self.train;
        push("train.epochs", t.epochs.to_string());
        push("train.batch_size", t.batch_size.to_string());
        push("train.lr", t.lr.to_string());
        push("train.warmup_iters", t.warmup_iters.to_string());
        push("train.milestones", join(&t.milestones));
        push("train.decay", t.decay.to_string());
        push("train.momentum", t.momentum.to_string());
        push("train.weight_decay", t.weight_decay.to_string());
        push("train.patience", t.patience.to_string());
        push("train.afa", t.afa_on.to_string());
        push("train.afn", t.afn_on.to_string());
        let p = &t.perturb;
        push("afan.steps", p.steps.to_string());
        push("afan.alpha_max", p.alpha_max.to_string());
        push("afan.epsilon", p.epsilon.to_string());
        push("afan.k", p.k.to_string());
        push("afan.lambda", p.lambda.to_string());
        push(
            "afan.schedule",
            match p.schedule {
                Schedule::Grid => "grid",
                Schedule::RandomUniform => "random",
            }
            .into(),
        );
        push(
            "afan.noise",
            match p.noise_mode {
                NoiseMode::Adversarial => "adversarial",
                NoiseMode::Gaussian => "gaussian",
            }
            .into(),
        );
        push("attack.steps", self.attack.steps.to_string());
        push("attack.alpha", self.attack.alpha.to_string());
        push("attack.epsilon", self.attack.epsilon.to_string());
        push("attack.clamp_min", self.attack.clamp.0.to_string());
        push("attack.clamp_max", self.attack.clamp.1.to_string());
        push("eval.epsilons", join(&self.eval.epsilons));
        push(
            "eval.checkpoint",
            self.eval.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        push("eval.flatness", self.eval.flatness.to_string());
        push("eval.dump_features", self.eval.dump_features.to_string());
        push("flatness.power_iters", self.flatness.power.iters.to_string());
        push("flatness.tol", self.flatness.power.tol.to_string());
        push("flatness.probes", self.flatness.probes.to_string());
        push("flatness.max_samples", self.flatness.max_samples.to_string());
        push("landscape.grid", self.landscape.grid.to_string());
        push("landscape.span", self.landscape.span.to_string());
        push("landscape.max_samples", self.landscape.max_samples.to_string());
        push(
            "landscape.checkpoints",
            self.landscape
                .checkpoints
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("ablate.seeds", self.ablate.seeds.to_string());
        push("ablate.flatness", self.ablate.flatness.to_string());
        for cell in &self.ablate.cells {
            let body: Vec<String> = cell.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            push(&format!("ablate.cell.{}", cell.name), body.join(","));
        }
        out
    }

    /// The resolved config as `key = value` lines.
    pub fn resolved_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Copy with `overrides` applied and the master seed replaced.
    pub fn derive_run(&self, overrides: &[(String, String)], seed: u64) -> Result<Self> {
        let mut kv = KvConfig::default();
        for (k, v) in self.to_kv() {
            if !k.starts_with("ablate.cell.") {
                kv.set(&k, &v);
            }
        }
        for (k, v) in overrides {
            kv.set(k, v);
        }
        kv.set("seed", &seed.to_string());
        let mut c = Self::from_kv(&kv)?;
        c.ablate.cells = self.ablate.cells.clone();
        Ok(c)
    }

    /// The training config with its seed taken from the master seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive(self.seed, Concern::Init, 0)
    }

    pub fn flatness_config(&self) -> FlatnessConfig {
        FlatnessConfig {
            power: PowerConfig {
                seed: derive(self.seed, Concern::Estimators, 0),
                ..self.flatness.power.clone()
            },
            ..self.flatness.clone()
        }
    }

    pub fn perturb(&self) -> &PerturbConfig {
        &self.train.perturb
    }
}

/// `ablate.cell.<name> = key=value,key=value`.
fn parse_cell(key: &str, v: &str) -> Result<AblationCell> {
    let name = &key["ablate.cell.".len()..];
    if name.is_empty() {
        return Err(Error::invalid(key, "cell name is empty"));
    }
    let overrides = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::invalid(key, format!("{a:?} is not key=value")))
        })
        .collect::<Result<_>>()?;
    Ok(AblationCell {
        name: name.to_string(),
        overrides,
    })
}

/// `path` resolved against the output root when relative.
pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
