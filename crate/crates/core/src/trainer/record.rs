use std::io::Write;

use serde::{Deserialize, Serialize};

use super::LossParts;
use crate::error::{Error, Result};

/// One training iteration. `wall_time` is kept in memory but left out of
/// the metrics file so identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub l_clean: f64,
    pub l_adv: Vec<f64>,
    pub total: f64,
    pub train_acc: f64,
    #[serde(skip)]
    pub wall_time: f64,
}

impl RunRecord {
    pub fn new(iteration: usize, epoch: usize, lr: f64, lambda: f64, parts: &LossParts, wall_time: f64) -> Self {
        RunRecord {
            iteration,
            epoch,
            lr,
            lambda,
            l_clean: parts.l_clean,
            l_adv: parts.l_adv.clone(),
            total: parts.total,
            train_acc: parts.accuracy(),
            wall_time,
        }
    }

    /// `|total - (l_clean + lambda * sum(l_adv))|`, with the sum taken in
    /// recording order.
    pub fn decomposition_error(&self) -> f64 {
        if self.l_adv.is_empty() {
            return (self.total - self.l_clean).abs();
        }
        let sum = self.l_adv.iter().skip(1).fold(self.l_adv[0], |a, b| a + b);
        (self.total - (self.l_clean + self.lambda * sum)).abs()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Writes one JSON object per line.
pub fn write_records(records: &[RunRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line()).map_err(|e| Error::io("metrics", e))?;
    }
    Ok(())
}
