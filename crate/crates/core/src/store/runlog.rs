//! `runlog.jsonl`: one [`StepRecord`] JSON object per line, step 0 being the
//! evaluation of the initial (source-trained) model.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub unsup: f64,
    pub con: f64,
    pub sim: f64,
    pub total: f64,
    pub unsup_weight: f64,
    pub lambda_con: f64,
    pub lambda_sim: f64,
}

impl LossBreakdown {
    /// `sup + w·unsup + λ_con·con + λ_sim·sim`.
    pub fn weighted_sum(&self) -> f64 {
        self.sup
            + self.unsup_weight * self.unsup
            + self.lambda_con * self.con
            + self.lambda_sim * self.sim
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub predictions: usize,
    pub accepted: usize,
    pub direct: usize,
    pub mined: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_ap: f64,
    pub accuracy: f64,
    /// `None` for classes without ground truth in the evaluation split.
    pub per_class_ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub tau_high: f64,
    pub pseudo: PseudoLabelStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::Validation(format!(
                    "run log step {} does not follow {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// `(step, mean AP)` of every evaluated step.
    pub fn eval_points(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.eval.as_ref().map(|e| (r.step, e.mean_ap)))
            .collect()
    }
}

pub fn write_runlog(path: impl AsRef<Path>, log: &RunLog) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &log.records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_runlog(path: impl AsRef<Path>) -> Result<RunLog> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut log = RunLog::default();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        log.push(rec)?;
    }
    Ok(log)
}
