//! Binary checkpoint format.
//!
//! ```text
//! "AFAN" | version: u32 LE | header_len: u64 LE | header: UTF-8 key=value lines
//! blob_count: u64 LE
//! per blob: name_len u64 | name | ndim u64 | dims u64 * ndim | value_count u64 | f64 LE * value_count
//! ```
//!
//! Blobs are the trainable parameters in declaration order followed by the
//! batch-norm running statistics (mean then variance per layer).

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelSpec, SplitModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFAN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes `model`. `extra` lines (e.g. the resolved run configuration)
/// are appended to the header after the model spec.
pub fn write_checkpoint(model: &SplitModel, extra: &str, out: &mut impl Write) -> std::io::Result<()> {
    let mut header = model.spec().to_string();
    if !extra.is_empty() {
        header.push_str(extra);
        if !extra.ends_with('\n') {
            header.push('\n');
        }
    }
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header.as_bytes())?;

    let blobs: Vec<(&str, &Tensor)> = model
        .params()
        .iter()
        .map(|p| (p.name.as_str(), &p.tensor))
        .chain(
            model
                .running_stats()
                .iter()
                .flat_map(|(m, v)| [(m.name.as_str(), &m.tensor), (v.name.as_str(), &v.tensor)]),
        )
        .collect();
    out.write_all(&(blobs.len() as u64).to_le_bytes())?;
    for (name, t) in blobs {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        out.write_all(&(t.len() as u64).to_le_bytes())?;
        for v in t.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source.to_string(),
            location: format!("byte offset {}", self.pos),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if v > remaining.max(1 << 16) {
            return Err(self.err(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
}

/// Parses a checkpoint, returning the model and the full header text.
pub fn read_checkpoint(bytes: &[u8], source: &str) -> Result<(SplitModel, String)> {
    let mut c = Cursor { bytes, pos: 0, source };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(c.err("bad magic"));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(c.err(format!("unsupported version {version}")));
    }
    let hlen = c.len()?;
    let header = std::str::from_utf8(c.take(hlen)?)
        .map_err(|_| c.err("header is not UTF-8"))?
        .to_string();
    let spec = ModelSpec::from_kv(header.lines().filter_map(|l| l.split_once('=')))?;
    let mut model = SplitModel::build(&spec, 0)?;

    let count = c.len()?;
    let expected = model.params().len() + 2 * model.running_stats().len();
    if count != expected {
        return Err(c.err(format!("expected {expected} blobs, found {count}")));
    }
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.len()?;
        let name = String::from_utf8(c.take(nlen)?.to_vec()).map_err(|_| c.err("blob name is not UTF-8"))?;
        let ndim = c.len()?;
        let dims = (0..ndim).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let n = c.len()?;
        let raw = c.take(n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, values).map_err(|e| c.err(e.to_string()))?;
        blobs.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes"));
    }

    let mut it = blobs.into_iter();
    let mut assign = |slot: &mut super::Param, c: &Cursor| -> Result<()> {
        let (name, t) = it.next().expect("count checked");
        if name != slot.name || t.shape() != slot.tensor.shape() {
            return Err(c.err(format!(
                "blob {name:?} {:?} does not match parameter {:?} {:?}",
                t.shape(),
                slot.name,
                slot.tensor.shape()
            )));
        }
        slot.tensor.values_mut().copy_from_slice(t.values());
        Ok(())
    };
    for p in model.params_mut() {
        assign(p, &c)?;
    }
    for (m, v) in model.running_stats_mut() {
        assign(m, &c)?;
        assign(v, &c)?;
    }
    Ok((model, header))
}

pub fn save_checkpoint(model: &SplitModel, extra: &str, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, extra, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SplitModel, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, &path.display().to_string())
}
