use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::config::{resolve_output, AblationCell, DataSource, ExperimentConfig};
use super::data::{gen_synthetic_with, load_external, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{flatness, model_loss_slice, robust_accuracy, standard_accuracy, AttackConfig, FlatnessReport};
use crate::afan::{build_spectrum, write_feature_dump};
use crate::models::{load_checkpoint, write_checkpoint, BnMode, SplitModel};
use crate::par::map_indexed;
use crate::seed::{derive, rng_for, Concern};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{train_with, EpochSummary, RunRecord, TrainData};

/// Written into an output directory when a command fails part-way.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

fn config_json(cfg: &ExperimentConfig) -> Value {
    let mut m = Map::new();
    for (k, v) in cfg.to_kv() {
        m.insert(k, Value::String(v));
    }
    Value::Object(m)
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes through a `.partial` file renamed into place on success.
fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = partial_path(path);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut out = BufWriter::new(file);
    write(&mut out)?;
    out.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(out);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_file(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value).map_err(|e| Error::io(path, e.into()))?;
        writeln!(out).map_err(|e| Error::io(path, e))
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs `f` in `dir`, leaving a marker with the error when it fails.
fn with_marker<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    create_dir(dir)?;
    let marker = dir.join(INCOMPLETE_MARKER);
    let result = f();
    match &result {
        Ok(_) => {
            if marker.exists() {
                fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            }
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
        }
    }
    result
}

/// Loads or generates the configured data and assigns splits.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut ds = match &cfg.data.source {
        DataSource::Synthetic {
            kind,
            n,
            classes,
            noise,
        } => gen_synthetic_with(
            &SyntheticSpec {
                kind: *kind,
                n: *n,
                classes: *classes,
                noise: *noise,
            },
            cfg.seed,
        )?,
        DataSource::External { path, format } => load_external(path, *format)?,
    };
    ds.partition(cfg.data.test_fraction, cfg.data.val_fraction, cfg.seed)?;
    Ok(ds)
}

fn check_compatible(model: &SplitModel, ds: &Dataset) -> Result<()> {
    if model.spec().input_shape() != ds.input_shape() {
        return Err(Error::invalid(
            "model.input",
            format!("model expects {:?}, data has {:?}", model.spec().input_shape(), ds.input_shape()),
        ));
    }
    if model.spec().classes < ds.classes {
        return Err(Error::invalid(
            "model.classes",
            format!("data has {} classes", ds.classes),
        ));
    }
    Ok(())
}

fn record_line(r: &RunRecord) -> String {
    let mut v = serde_json::to_value(r).expect("records serialize");
    v.as_object_mut()
        .expect("records are objects")
        .insert("kind".into(), Value::String("iteration".into()));
    v.to_string()
}

fn epoch_line(e: &EpochSummary) -> String {
    json!({
        "kind": "epoch",
        "epoch": e.epoch,
        "train_loss": e.train_loss,
        "train_acc": e.train_acc,
        "val_acc": e.val_acc,
    })
    .to_string()
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: SplitModel,
    pub dataset: Dataset,
    pub best_epoch: usize,
    pub epochs: Vec<EpochSummary>,
    pub records: Vec<RunRecord>,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// Trains one configuration. With `dir` set, writes `metrics.jsonl`,
/// `checkpoint.afan` and `timing.jsonl` there.
pub fn train_run(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<RunResult> {
    let dataset = prepare_dataset(cfg)?;
    let model = SplitModel::build(&cfg.model, cfg.init_seed())?;
    check_compatible(&model, &dataset)?;
    let (x, y) = dataset
        .subset(Split::Train)?
        .ok_or_else(|| Error::domain("training split is empty"))?;
    let val = dataset.subset(Split::Val)?;
    let data = TrainData {
        x: &x,
        y: &y,
        val_x: val.as_ref().map(|v| &v.0),
        val_y: val.as_ref().map_or(&[][..], |v| &v.1[..]),
    };
    let train_cfg = cfg.train_config();

    let mut metrics = match dir {
        Some(d) => {
            let path = d.join("metrics.jsonl");
            let tmp = partial_path(&path);
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let header = json!({"kind": "config", "config": config_json(cfg), "dataset": dataset.provenance});
            writeln!(w, "{header}").map_err(|e| Error::io(&tmp, e))?;
            Some((path, tmp, w))
        }
        None => None,
    };
    let outcome = train_with(model, data, &train_cfg, |r| {
        if let Some((_, tmp, w)) = metrics.as_mut() {
            writeln!(w, "{}", record_line(r)).map_err(|e| Error::io(tmp.as_path(), e))?;
        }
        Ok(())
    })?;

    let val_acc = outcome.epochs.get(outcome.best_epoch).and_then(|e| e.val_acc);
    let test_acc = match dataset.subset(Split::Test)? {
        Some((tx, ty)) => Some(standard_accuracy(&outcome.model, &tx, &ty)?),
        None => None,
    };

    if let (Some(d), Some((path, tmp, mut w))) = (dir, metrics) {
        let io = |e| Error::io(tmp.as_path(), e);
        for e in &outcome.epochs {
            writeln!(w, "{}", epoch_line(e)).map_err(io)?;
        }
        let result = json!({
            "kind": "result",
            "best_epoch": outcome.best_epoch,
            "iterations": outcome.records.len(),
            "val_acc": val_acc,
            "test_acc": test_acc,
        });
        writeln!(w, "{result}").map_err(io)?;
        w.flush().map_err(io)?;
        drop(w);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;

        let extra = format!("{}best_epoch = {}\n", cfg.resolved_text(), outcome.best_epoch);
        write_file(&d.join("checkpoint.afan"), |out| {
            write_checkpoint(&outcome.model, &extra, out).map_err(|e| Error::io("checkpoint.afan", e))
        })?;
        write_file(&d.join("timing.jsonl"), |out| {
            for r in &outcome.records {
                writeln!(out, "{}", json!({"iteration": r.iteration, "wall_time": r.wall_time}))
                    .map_err(|e| Error::io("timing.jsonl", e))?;
            }
            Ok(())
        })?;
    }

    Ok(RunResult {
        model: outcome.model,
        dataset,
        best_epoch: outcome.best_epoch,
        epochs: outcome.epochs,
        records: outcome.records,
        val_acc,
        test_acc,
    })
}

/// Trains and writes the checkpoint and metrics into the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunResult> {
    let dir = resolve_output(&cfg.output_dir);
    with_marker(&dir, || train_run(cfg, Some(&dir)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustPoint {
    pub epsilon: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub split: Split,
    pub samples: usize,
    pub standard_accuracy: f64,
    pub robust: Vec<RobustPoint>,
    pub flatness: Option<FlatnessReport>,
}

fn checkpoint_path(cfg: &ExperimentConfig, explicit: Option<&PathBuf>) -> PathBuf {
    match explicit {
        Some(p) => resolve_output(p),
        None => resolve_output(&cfg.output_dir).join("checkpoint.afan"),
    }
}

fn eval_split(ds: &Dataset) -> Result<(Split, (crate::tensor::Tensor, Vec<usize>))> {
    for split in [Split::Test, Split::Val, Split::Train] {
        if let Some(s) = ds.subset(split)? {
            return Ok((split, s));
        }
    }
    Err(Error::domain("dataset is empty"))
}

fn limited(ds: &Dataset, split: Split, max: usize) -> Result<(crate::tensor::Tensor, Vec<usize>)> {
    let idx: Vec<usize> = ds.indices(split).into_iter().take(max).collect();
    if idx.is_empty() {
        return Err(Error::domain(format!("{split:?} split is empty")));
    }
    Ok((ds.x.select_rows(&idx)?, idx.iter().map(|&i| ds.labels[i]).collect()))
}

/// Standard and robust accuracy of a checkpoint on the test split, plus
/// Hessian flatness on the training split when enabled.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let dir = resolve_output(&cfg.output_dir);
    with_marker(&dir, || {
        let path = checkpoint_path(cfg, cfg.eval.checkpoint.as_ref());
        let (model, _) = load_checkpoint(&path)?;
        let ds = prepare_dataset(cfg)?;
        check_compatible(&model, &ds)?;
        let (split, (x, y)) = eval_split(&ds)?;
        let sa = standard_accuracy(&model, &x, &y)?;
        let robust = cfg
            .eval
            .epsilons
            .iter()
            .map(|&epsilon| {
                let attack = AttackConfig {
                    epsilon,
                    ..cfg.attack.clone()
                };
                Ok(RobustPoint {
                    epsilon,
                    accuracy: robust_accuracy(&model, &x, &y, &attack)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let flat = if cfg.eval.flatness {
            let (fx, fy) = limited(&ds, Split::Train, cfg.flatness.max_samples)?;
            Some(flatness(&model, &fx, &fy, &cfg.flatness_config())?)
        } else {
            None
        };
        if cfg.eval.dump_features > 0 {
            dump_features(cfg, &model, &x, &y, &dir)?;
        }
        let report = EvalReport {
            checkpoint: path.display().to_string(),
            split,
            samples: y.len(),
            standard_accuracy: sa,
            robust,
            flatness: flat,
        };
        write_json(
            &dir.join("eval.json"),
            &json!({"config": config_json(cfg), "report": report}),
        )?;
        Ok(report)
    })
}

/// Writes clean, adversarial and mixed split-point features of the first
/// `eval.dump_features` samples. The backbone uses running statistics; the
/// perturbations follow the configured strength spectrum.
fn dump_features(cfg: &ExperimentConfig, model: &SplitModel, x: &Tensor, y: &[usize], dir: &Path) -> Result<()> {
    let n = cfg.eval.dump_features.min(y.len());
    let idx: Vec<usize> = (0..n).collect();
    let xs = x.select_rows(&idx)?;
    let mut tape = Tape::new();
    let mut b = model.bind(&mut tape, BnMode::Eval, false);
    let xv = tape.constant(&xs);
    let f = model.forward_backbone(&mut tape, &mut b, xv)?;
    let f_clean = tape.tensor(f);
    let mut rng = rng_for(cfg.seed, Concern::Noise, 1);
    let set = build_spectrum(&cfg.train.perturb, model, &f_clean, &y[..n], &mut rng)?.with_mix()?;
    let path = dir.join("features.afd");
    write_file(&path, |out| write_feature_dump(&set, out).map_err(|e| Error::io(&path, e)))?;
    write_json(
        &dir.join("features.json"),
        &json!({
            "config": config_json(cfg),
            "split": model.active_split(),
            "samples": n,
            "strengths": set.entries.iter().map(|e| e.strength).collect::<Vec<_>>(),
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeEntry {
    pub checkpoint: String,
    pub json_path: String,
    pub matrix_path: String,
    pub center: Option<f64>,
    pub curvature_proxy: f64,
}

/// Loss slices for every configured checkpoint, as JSON and as a plain
/// matrix with `#` comment lines carrying the config.
pub fn cmd_landscape(cfg: &ExperimentConfig) -> Result<Vec<LandscapeEntry>> {
    let dir = resolve_output(&cfg.output_dir);
    with_marker(&dir, || {
        let checkpoints: Vec<PathBuf> = if cfg.landscape.checkpoints.is_empty() {
            vec![checkpoint_path(cfg, None)]
        } else {
            cfg.landscape.checkpoints.iter().map(|p| resolve_output(p)).collect()
        };
        let ds = prepare_dataset(cfg)?;
        let (x, y) = limited(&ds, Split::Train, cfg.landscape.max_samples)?;
        let seed = derive(cfg.seed, Concern::Estimators, 1);
        let mut entries = Vec::new();
        for (i, path) in checkpoints.iter().enumerate() {
            let (model, _) = load_checkpoint(path)?;
            check_compatible(&model, &ds)?;
            let slice = model_loss_slice(&model, &x, &y, cfg.landscape.grid, cfg.landscape.span, seed)?;
            let stem = path.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
            let json_path = dir.join(format!("slice_{i}_{stem}.json"));
            let matrix_path = dir.join(format!("slice_{i}_{stem}.txt"));
            let curvature = slice.curvature_proxy();
            write_json(
                &json_path,
                &json!({
                    "config": config_json(cfg),
                    "checkpoint": path.display().to_string(),
                    "samples": y.len(),
                    "curvature_proxy": curvature,
                    "slice": slice,
                }),
            )?;
            write_file(&matrix_path, |out| {
                let io = |e| Error::io(matrix_path.as_path(), e);
                writeln!(out, "# checkpoint = {}", path.display()).map_err(io)?;
                for line in cfg.resolved_text().lines() {
                    writeln!(out, "# {line}").map_err(io)?;
                }
                let coords: Vec<String> = slice.coords.iter().map(|c| format!("{c:e}")).collect();
                writeln!(out, "# coords = {}", coords.join(" ")).map_err(io)?;
                out.write_all(slice.to_matrix().as_bytes()).map_err(io)
            })?;
            entries.push(LandscapeEntry {
                checkpoint: path.display().to_string(),
                json_path: json_path.display().to_string(),
                matrix_path: matrix_path.display().to_string(),
                center: slice.center(),
                curvature_proxy: curvature,
            });
        }
        Ok(entries)
    })
}

/// Outcome of one (cell, seed) job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub test_acc: f64,
    pub val_acc: Option<f64>,
    pub spectral_norm: Option<f64>,
    pub trace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub runs: usize,
    pub test_acc: (f64, f64),
    pub spectral_norm: Option<(f64, f64)>,
    pub trace: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<CellRun>,
}

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    /// Fixed-width text with one row per cell, `mean ± std` per column.
    pub fn to_text(&self) -> String {
        let fmt = |m: Option<(f64, f64)>| m.map_or("-".to_string(), |(a, s)| format!("{a:.4} ± {s:.4}"));
        let mut out = format!(
            "{:<16} {:>5} {:>18} {:>22} {:>22}\n",
            "cell", "runs", "test_acc", "spectral_norm", "trace"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>5} {:>18} {:>22} {:>22}\n",
                r.cell,
                r.runs,
                fmt(Some(r.test_acc)),
                fmt(r.spectral_norm),
                fmt(r.trace)
            ));
        }
        out
    }
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn run_cell(base: &ExperimentConfig, cell: &AblationCell, seed: u64, root: &Path) -> Result<CellRun> {
    let cfg = base.derive_run(&cell.overrides, seed)?;
    let dir = root.join("cells").join(&cell.name).join(format!("seed{seed}"));
    create_dir(&dir)?;
    let run = train_run(&cfg, Some(&dir))?;
    let test_acc = run
        .test_acc
        .ok_or_else(|| Error::invalid("data.test_fraction", "ablation needs a test split"))?;
    let (spectral_norm, trace) = if base.ablate.flatness {
        let (fx, fy) = limited(&run.dataset, Split::Train, cfg.flatness.max_samples)?;
        let f = flatness(&run.model, &fx, &fy, &cfg.flatness_config())?;
        write_json(&dir.join("flatness.json"), &json!({"config": config_json(&cfg), "flatness": f}))?;
        (Some(f.spectral.value), Some(f.trace.mean))
    } else {
        (None, None)
    };
    Ok(CellRun {
        cell: cell.name.clone(),
        seed,
        test_acc,
        val_acc: run.val_acc,
        spectral_norm,
        trace,
    })
}

/// Every cell over seeds `seed .. seed + ablate.seeds`, in parallel, then a
/// per-cell summary table.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationTable> {
    let dir = resolve_output(&cfg.output_dir);
    with_marker(&dir, || {
        let seeds = cfg.ablate.seeds;
        let jobs: Vec<(usize, u64)> = (0..cfg.ablate.cells.len())
            .flat_map(|c| (0..seeds as u64).map(move |s| (c, s)))
            .collect();
        let results = map_indexed(jobs.len(), |j| {
            let (c, s) = jobs[j];
            run_cell(cfg, &cfg.ablate.cells[c], cfg.seed + s, &dir)
        });
        let runs: Vec<CellRun> = results.into_iter().collect::<Result<_>>()?;
        let rows = cfg
            .ablate
            .cells
            .iter()
            .map(|cell| {
                let mine: Vec<&CellRun> = runs.iter().filter(|r| r.cell == cell.name).collect();
                let col = |f: fn(&CellRun) -> Option<f64>| {
                    let v: Option<Vec<f64>> = mine.iter().map(|r| f(r)).collect();
                    v.map(|v| mean_std(&v))
                };
                AblationRow {
                    cell: cell.name.clone(),
                    runs: mine.len(),
                    test_acc: col(|r| Some(r.test_acc)).expect("accuracy is always present"),
                    spectral_norm: col(|r| r.spectral_norm),
                    trace: col(|r| r.trace),
                }
            })
            .collect();
        let table = AblationTable { rows, runs };
        write_json(
            &dir.join("ablation.json"),
            &json!({"config": config_json(cfg), "table": table}),
        )?;
        write_file(&dir.join("ablation.txt"), |out| {
            let io = |e| Error::io("ablation.txt", e);
            for line in cfg.resolved_text().lines() {
                writeln!(out, "# {line}").map_err(io)?;
            }
            out.write_all(table.to_text().as_bytes()).map_err(io)
        })?;
        Ok(table)
    })
}
