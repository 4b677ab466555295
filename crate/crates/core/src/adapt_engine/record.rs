use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discrepancy::DiscrepancyReport;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub mse: f64,
    pub oks: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageALosses {
    pub supervised: f64,
    /// Agreement of the second inference-branch head with the inference head.
    pub warm_second: f64,
    /// Agreement of the adversarial head with the inference head.
    pub warm_adversarial: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBLosses {
    /// Heatmap term as minimized: regression onto the ground-false target, or
    /// the negated branch disagreement.
    pub heatmap: f64,
    pub report: Option<DiscrepancyReport>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCLosses {
    pub mse: f64,
    pub oks: f64,
    pub report: Option<DiscrepancyReport>,
    pub total: f64,
}

/// Branch disagreement `mse(F∘G, F_a∘G)` on a held target batch around one
/// iteration's B and C steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub before_b: f64,
    pub after_b: f64,
    pub after_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Pretrain { iteration: usize, epoch: usize, lr: f64, losses: PretrainLosses },
    Adapt { iteration: usize, epoch: usize, a: StageALosses, b: StageBLosses, c: StageCLosses, probe: Option<Probe> },
    Validation { iteration: usize, epoch: usize, pck: f64 },
}

impl LogRecord {
    pub fn iteration(&self) -> usize {
        match self {
            Self::Pretrain { iteration, .. } | Self::Adapt { iteration, .. } | Self::Validation { iteration, .. } => *iteration,
        }
    }
}

/// Ordered training records, stored as line-delimited JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    pub fn adapt_records(&self) -> impl Iterator<Item = (usize, usize, &StageALosses, &StageBLosses, &StageCLosses)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Adapt { iteration, epoch, a, b, c, .. } => Some((*iteration, *epoch, a, b, c)),
            _ => None,
        })
    }

    pub fn probes(&self) -> impl Iterator<Item = (usize, &Probe)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Adapt { epoch, probe: Some(p), .. } => Some((*epoch, p)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
        }
        Ok(Self { records })
    }
}

/// Per-epoch window test of the min-max signature: fraction of windows where
/// the mean disagreement rose across B and fell across C.
pub fn minmax_windows(log: &TrainLog) -> (usize, usize) {
    let mut by_epoch: std::collections::BTreeMap<usize, (f64, f64, usize)> = Default::default();
    for (epoch, p) in log.probes() {
        let e = by_epoch.entry(epoch).or_default();
        e.0 += p.after_b - p.before_b;
        e.1 += p.after_c - p.after_b;
        e.2 += 1;
    }
    let good = by_epoch.values().filter(|(up, down, _)| *up > 0.0 && *down < 0.0).count();
    (good, by_epoch.len())
}
