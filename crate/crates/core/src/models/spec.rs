use std::fmt;

use crate::error::{Error, Result};

/// Network family and its dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// Dense-BN-ReLU hidden layers followed by a linear classifier.
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// Conv stem, one residual block per entry of `channels`, global average
    /// pooling and a linear classifier. Every block after the first halves
    /// the spatial resolution.
    TinyResnet {
        input: [usize; 3],
        channels: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub classes: usize,
    /// Split point name; the last one when unset.
    pub split: Option<String>,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::Mlp {
                input_dim,
                hidden: hidden.to_vec(),
            },
            classes,
            split: None,
        }
    }

    pub fn tiny_resnet(input: [usize; 3], channels: &[usize], classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::TinyResnet {
                input,
                channels: channels.to_vec(),
            },
            classes,
            split: None,
        }
    }

    pub fn with_split(mut self, name: &str) -> Self {
        self.split = Some(name.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("model.classes", "need at least 2 classes"));
        }
        match &self.arch {
            Architecture::Mlp { input_dim, hidden } => {
                if *input_dim == 0 {
                    return Err(Error::invalid("model.input", "must be positive"));
                }
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::invalid(
                        "model.hidden",
                        "need at least one hidden layer, all widths positive",
                    ));
                }
            }
            Architecture::TinyResnet { input, channels } => {
                if input.contains(&0) {
                    return Err(Error::invalid("model.input", "all dimensions must be positive"));
                }
                if channels.is_empty() || channels.contains(&0) {
                    return Err(Error::invalid(
                        "model.channels",
                        "need at least one block, all channel counts positive",
                    ));
                }
            }
        }
        if let Some(s) = &self.split {
            if !self.split_points().contains(s) {
                return Err(Error::invalid(
                    "model.split",
                    format!("unknown split point {s:?}, expected one of {:?}", self.split_points()),
                ));
            }
        }
        Ok(())
    }

    /// Named feature-extraction locations, in network order.
    pub fn split_points(&self) -> Vec<String> {
        match &self.arch {
            Architecture::Mlp { hidden, .. } => (1..=hidden.len()).map(|i| format!("layer{i}")).collect(),
            Architecture::TinyResnet { channels, .. } => {
                (1..=channels.len()).map(|i| format!("block{i}")).collect()
            }
        }
    }

    /// Per-sample input shape (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.arch {
            Architecture::Mlp { input_dim, .. } => vec![*input_dim],
            Architecture::TinyResnet { input, .. } => input.to_vec(),
        }
    }

    /// Serializes as `model.*` key=value lines.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let join = |v: &[usize], sep: &str| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep);
        let mut out = Vec::new();
        match &self.arch {
            Architecture::Mlp { input_dim, hidden } => {
                out.push(("model.arch".into(), "mlp".into()));
                out.push(("model.input".into(), input_dim.to_string()));
                out.push(("model.hidden".into(), join(hidden, ",")));
            }
            Architecture::TinyResnet { input, channels } => {
                out.push(("model.arch".into(), "tiny-resnet".into()));
                out.push(("model.input".into(), join(input, "x")));
                out.push(("model.channels".into(), join(channels, ",")));
            }
        }
        out.push(("model.classes".into(), self.classes.to_string()));
        if let Some(s) = &self.split {
            out.push(("model.split".into(), s.clone()));
        }
        out
    }

    /// Inverse of [`ModelSpec::to_kv`]; unrelated keys are ignored.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut arch = None;
        let mut input = None;
        let mut hidden = None;
        let mut channels = None;
        let mut classes = None;
        let mut split = None;
        for (k, v) in pairs {
            match k {
                "model.arch" => arch = Some(v.to_string()),
                "model.input" => input = Some(v.to_string()),
                "model.hidden" => hidden = Some(parse_list(k, v, ',')?),
                "model.channels" => channels = Some(parse_list(k, v, ',')?),
                "model.classes" => classes = Some(parse_usize(k, v)?),
                "model.split" => split = Some(v.to_string()).filter(|s| !s.is_empty()),
                _ => {}
            }
        }
        let classes = classes.ok_or_else(|| Error::invalid("model.classes", "missing"))?;
        let input = input.ok_or_else(|| Error::invalid("model.input", "missing"))?;
        let arch = match arch.as_deref() {
            Some("mlp") => Architecture::Mlp {
                input_dim: parse_usize("model.input", &input)?,
                hidden: hidden.ok_or_else(|| Error::invalid("model.hidden", "missing"))?,
            },
            Some("tiny-resnet") => {
                let dims = parse_list("model.input", &input, 'x')?;
                let input: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| Error::invalid("model.input", "expected CxHxW"))?;
                Architecture::TinyResnet {
                    input,
                    channels: channels.ok_or_else(|| Error::invalid("model.channels", "missing"))?,
                }
            }
            Some(other) => return Err(Error::invalid("model.arch", format!("unknown architecture {other:?}"))),
            None => return Err(Error::invalid("model.arch", "missing")),
        };
        let spec = ModelSpec { arch, classes, split };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid(key, format!("expected a non-negative integer, got {v:?}")))
}

fn parse_list(key: &str, v: &str, sep: char) -> Result<Vec<usize>> {
    v.split(sep).map(|x| parse_usize(key, x)).collect()
}
