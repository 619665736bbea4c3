//! Per-sample feature dumps for external visualization.
//!
//! ```text
//! "AFDF" | version: u32 LE | record_count: u64 LE
//! per record: kind u8 (0 clean, 1 adv, 2 mix) | sample u64 | strength f64
//!             | ndim u64 | dims u64 * ndim | f64 LE * prod(dims)
//! ```
//! All integers and floats are little-endian.

use std::io::Write;

use super::AugmentedSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"AFDF";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    Clean = 0,
    Adv = 1,
    Mix = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub kind: DumpKind,
    pub sample: usize,
    /// Zero for clean features.
    pub strength: f64,
    pub values: Tensor,
}

fn per_sample(t: &Tensor) -> impl Iterator<Item = (usize, Tensor)> + '_ {
    let n = t.batch();
    let shape = t.shape()[1..].to_vec();
    let len = t.len() / n;
    (0..n).map(move |i| {
        let v = t.values()[i * len..(i + 1) * len].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape.clone() };
        (i, Tensor::new(shape, v).expect("row shape"))
    })
}

/// Flattens an augmented set into per-sample records: clean features first,
/// then for each strength the adversarial and (when present) mixed features.
pub fn dump_records(set: &AugmentedSet) -> Vec<DumpRecord> {
    let mut out: Vec<DumpRecord> = per_sample(&set.f_clean)
        .map(|(sample, values)| DumpRecord {
            kind: DumpKind::Clean,
            sample,
            strength: 0.0,
            values,
        })
        .collect();
    for e in &set.entries {
        let mut views = vec![(DumpKind::Adv, &e.f_adv)];
        if let Some(m) = &e.f_mix {
            views.push((DumpKind::Mix, m));
        }
        for (kind, t) in views {
            out.extend(per_sample(t).map(|(sample, values)| DumpRecord {
                kind,
                sample,
                strength: e.strength,
                values,
            }));
        }
    }
    out
}

pub fn write_feature_dump(set: &AugmentedSet, out: &mut impl Write) -> std::io::Result<()> {
    let records = dump_records(set);
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in &records {
        out.write_all(&[r.kind as u8])?;
        out.write_all(&(r.sample as u64).to_le_bytes())?;
        out.write_all(&r.strength.to_le_bytes())?;
        out.write_all(&(r.values.shape().len() as u64).to_le_bytes())?;
        for d in r.values.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in r.values.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_feature_dump(bytes: &[u8]) -> Result<Vec<DumpRecord>> {
    let mut pos = 0usize;
    let err = |pos: usize, reason: &str| Error::Parse {
        source_name: "feature dump".into(),
        location: format!("byte offset {pos}"),
        reason: reason.into(),
    };
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(err(pos, "truncated"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != DUMP_MAGIC {
        return Err(err(0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
    if version != DUMP_VERSION {
        return Err(err(4, "unsupported version"));
    }
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8"));
    let count = u64_of(take(8)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let kind = match take(1)?[0] {
            0 => DumpKind::Clean,
            1 => DumpKind::Adv,
            2 => DumpKind::Mix,
            _ => return Err(err(0, "unknown record kind")),
        };
        let sample = u64_of(take(8)?) as usize;
        let strength = f64::from_le_bytes(take(8)?.try_into().expect("8"));
        let ndim = u64_of(take(8)?) as usize;
        if ndim > 8 {
            return Err(err(0, "implausible rank"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64_of(take(8)?) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(n.checked_mul(8).ok_or_else(|| err(0, "overflow"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
            .collect();
        let values = Tensor::new(dims, values).map_err(|e| err(0, &e.to_string()))?;
        out.push(DumpRecord {
            kind,
            sample,
            strength,
            values,
        });
    }
    Ok(out)
}
