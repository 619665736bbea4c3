use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::seed::{rng_for, Concern};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labeled inputs with a split tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Vec<Split>,
    /// Generator and seed, or the source file.
    pub provenance: String,
}

impl Dataset {
    /// Every sample starts in the training split.
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if x.batch() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::domain(format!("label {} of sample {i} is not below {classes}", labels[i])));
        }
        if let Some(i) = x.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain(format!("input value {} at flat index {i} outside [0, 1]", x.values()[i])));
        }
        let n = labels.len();
        Ok(Dataset {
            x,
            labels,
            classes,
            splits: vec![Split::Train; n],
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Stratified seeded split: per class, `test_fraction` of the samples go
    /// to test and `val_fraction` of the remainder to validation.
    pub fn partition(&mut self, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<()> {
        for (name, f) in [("data.test_fraction", test_fraction), ("data.val_fraction", val_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid(name, "must be in [0, 1)"));
            }
        }
        let mut rng = rng_for(seed, Concern::Data, 1);
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            let n_val = ((idx.len() - n_test) as f64 * val_fraction).round() as usize;
            for (rank, &i) in idx.iter().enumerate() {
                self.splits[i] = if rank < n_test {
                    Split::Test
                } else if rank < n_test + n_val {
                    Split::Val
                } else {
                    Split::Train
                };
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Inputs and labels of one split; `None` when the split is empty.
    pub fn subset(&self, split: Split) -> Result<Option<(Tensor, Vec<usize>)>> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Ok(None);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(Some((self.x.select_rows(&idx)?, labels)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Gaussian clusters around points on a circle; 2-D vectors.
    Blobs,
    /// Interleaved spiral arms; 2-D vectors.
    Spirals,
    /// 16x16 grayscale images of squares, disks, triangles and crosses.
    Shapes16,
}

impl SyntheticKind {
    pub fn default_classes(self) -> usize {
        match self {
            SyntheticKind::Blobs | SyntheticKind::Spirals => 2,
            SyntheticKind::Shapes16 => 4,
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            SyntheticKind::Blobs => 0.08,
            SyntheticKind::Spirals => 0.02,
            SyntheticKind::Shapes16 => 0.1,
        }
    }

    pub fn input_shape(self) -> Vec<usize> {
        match self {
            SyntheticKind::Blobs | SyntheticKind::Spirals => vec![2],
            SyntheticKind::Shapes16 => vec![1, 16, 16],
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "spirals" => Ok(SyntheticKind::Spirals),
            "shapes16" => Ok(SyntheticKind::Shapes16),
            other => Err(Error::Usage(format!(
                "unknown dataset kind {other:?} (expected blobs, spirals or shapes16)"
            ))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Spirals => "spirals",
            SyntheticKind::Shapes16 => "shapes16",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n: usize) -> Self {
        SyntheticSpec {
            kind,
            n,
            classes: kind.default_classes(),
            noise: kind.default_noise(),
        }
    }
}

pub fn gen_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_with(&SyntheticSpec::new(kind, n), seed)
}

/// Class `i % classes` for sample `i` before a seeded shuffle, so classes
/// are exactly balanced when `classes` divides `n`.
pub fn gen_synthetic_with(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.n < 10 {
        return Err(Error::invalid("data.n", "must be at least 10"));
    }
    if spec.classes < 2 {
        return Err(Error::invalid("data.classes", "must be at least 2"));
    }
    if spec.kind == SyntheticKind::Shapes16 && spec.classes > 4 {
        return Err(Error::invalid("data.classes", "shapes16 has at most 4 classes"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("data.noise", "must be non-negative"));
    }
    let mut rng = rng_for(seed, Concern::Data, 0);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid("data.noise", e.to_string()))?;
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let per: usize = spec.kind.input_shape().iter().product();
    let mut values = Vec::with_capacity(spec.n * per);
    for &c in &labels {
        match spec.kind {
            SyntheticKind::Blobs => {
                let a = std::f64::consts::TAU * c as f64 / spec.classes as f64;
                values.push(0.5 + 0.3 * a.cos() + noise.sample(&mut rng));
                values.push(0.5 + 0.3 * a.sin() + noise.sample(&mut rng));
            }
            SyntheticKind::Spirals => {
                let t: f64 = rng.random();
                let r = 0.05 + 0.4 * t;
                let a = 3.0 * std::f64::consts::PI * t + std::f64::consts::TAU * c as f64 / spec.classes as f64;
                values.push(0.5 + r * a.cos() + noise.sample(&mut rng));
                values.push(0.5 + r * a.sin() + noise.sample(&mut rng));
            }
            SyntheticKind::Shapes16 => values.extend(shape_image(c, &mut rng, &noise)),
        }
    }
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let mut shape = vec![spec.n];
    shape.extend(spec.kind.input_shape());
    let provenance = format!(
        "synthetic:{} n={} classes={} noise={} seed={seed}",
        spec.kind, spec.n, spec.classes, spec.noise
    );
    Dataset::new(Tensor::new(shape, values)?, labels, spec.classes, provenance)
}

fn shape_image(class: usize, rng: &mut impl Rng, noise: &Normal<f64>) -> Vec<f64> {
    let cx = rng.random_range(5.0..11.0);
    let cy = rng.random_range(5.0..11.0);
    let size: f64 = rng.random_range(3.0..5.0);
    let fg = rng.random_range(0.6..1.0);
    let bg = rng.random_range(0.0..0.2);
    let mut img = Vec::with_capacity(256);
    for y in 0..16 {
        for x in 0..16 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match class {
                0 => dx.abs() <= size * 0.8 && dy.abs() <= size * 0.8,
                1 => dx * dx + dy * dy <= size * size,
                2 => dy <= size * 0.8 && dy >= -size * 0.8 && dx.abs() <= (dy + size * 0.8) * 0.6,
                _ => (dx.abs() <= size * 0.3 && dy.abs() <= size) || (dy.abs() <= size * 0.3 && dx.abs() <= size),
            };
            img.push(if inside { fg } else { bg } + noise.sample(rng));
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExternalFormat {
    /// One sample per line: comma-separated features, then the label.
    CsvVectors,
    /// Header `AFGR`, then u32 LE count, height, width and classes; per
    /// sample `height * width` bytes and one label byte.
    RawGrayImages,
}

impl FromStr for ExternalFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv-vectors" => Ok(ExternalFormat::CsvVectors),
            "raw-gray-images" => Ok(ExternalFormat::RawGrayImages),
            other => Err(Error::Usage(format!(
                "unknown data format {other:?} (expected csv-vectors or raw-gray-images)"
            ))),
        }
    }
}

impl fmt::Display for ExternalFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExternalFormat::CsvVectors => "csv-vectors",
            ExternalFormat::RawGrayImages => "raw-gray-images",
        })
    }
}

pub const RAW_GRAY_MAGIC: &[u8; 4] = b"AFGR";

pub fn load_external(path: &Path, format: ExternalFormat) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut ds = match format {
        ExternalFormat::CsvVectors => {
            let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
                source_name: name.clone(),
                location: format!("byte {}", e.utf8_error().valid_up_to()),
                reason: "not UTF-8".into(),
            })?;
            parse_csv(&text, &name)?
        }
        ExternalFormat::RawGrayImages => parse_raw_gray(&bytes, &name)?,
    };
    ds.provenance = format!("file:{name} format={format}");
    Ok(ds)
}

/// Blank lines and lines starting with `#` are skipped. The class count is
/// the largest label plus one.
pub fn parse_csv(text: &str, source: &str) -> Result<Dataset> {
    let err = |line: usize, reason: String| Error::Parse {
        source_name: source.to_string(),
        location: format!("line {line}"),
        reason,
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(err(line_no, "expected features followed by a label".into()));
        }
        let d = fields.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(err(line_no, format!("expected {} features, found {d}", dim.unwrap())));
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| err(line_no, format!("bad number {f:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(line_no, format!("feature {v} outside [0, 1]")));
            }
            values.push(v);
        }
        let label = fields[d];
        labels.push(label.parse::<usize>().map_err(|_| err(line_no, format!("bad label {label:?}")))?);
    }
    let dim = dim.ok_or_else(|| err(0, "no samples".into()))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vec![labels.len(), dim], values)?, labels, classes, format!("file:{source}"))
}

pub fn parse_raw_gray(bytes: &[u8], source: &str) -> Result<Dataset> {
    let err = |offset: usize, reason: String| Error::Parse {
        source_name: source.to_string(),
        location: format!("offset {offset}"),
        reason,
    };
    if bytes.len() < 20 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != RAW_GRAY_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, h, w, classes) = (word(0), word(1), word(2), word(3));
    if count == 0 || h == 0 || w == 0 || classes < 2 {
        return Err(err(4, "count, height and width must be positive and classes at least 2".into()));
    }
    let record = h * w + 1;
    let expected = 20 + count * record;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count);
    for s in 0..count {
        let off = 20 + s * record;
        values.extend(bytes[off..off + h * w].iter().map(|&b| b as f64 / 255.0));
        let label = bytes[off + h * w] as usize;
        if label >= classes {
            return Err(err(off + h * w, format!("label {label} not below {classes}")));
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![count, 1, h, w], values)?, labels, classes, format!("file:{source}"))
}

/// Writes every sample with full-precision features.
pub fn write_csv(ds: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    let d: usize = ds.input_shape().iter().product();
    for (row, label) in ds.x.values().chunks(d).zip(&ds.labels) {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{},{label}", fields.join(","))?;
    }
    Ok(())
}

/// Quantizes inputs to bytes. Needs `[N, 1, H, W]` inputs and at most 256
/// classes.
pub fn write_raw_gray(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    let s = ds.x.shape();
    if s.len() != 4 || s[1] != 1 || ds.classes > 256 {
        return Err(Error::invalid("data.format", "raw-gray-images needs single-channel images"));
    }
    let io = |e| Error::io("raw-gray-images", e);
    out.write_all(RAW_GRAY_MAGIC).map_err(io)?;
    for v in [s[0], s[2], s[3], ds.classes] {
        out.write_all(&(v as u32).to_le_bytes()).map_err(io)?;
    }
    for (img, &label) in ds.x.values().chunks(s[2] * s[3]).zip(&ds.labels) {
        let px: Vec<u8> = img.iter().map(|v| (v * 255.0).round() as u8).collect();
        out.write_all(&px).map_err(io)?;
        out.write_all(&[label as u8]).map_err(io)?;
    }
    Ok(())
}
