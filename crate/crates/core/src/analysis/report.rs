//! The run record and its on-disk layout:
//!
//! ```text
//! <dir>/report.json    full RunReport, pretty-printed
//! <dir>/accuracy.csv   stage,num_classes,accuracy,old_accuracy,new_accuracy
//! <dir>/cka.csv        stage,layer_i,layer_j,cka
//! <dir>/drift.csv      stage,class,displacement
//! ```
//!
//! Empty optional cells are written as empty strings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::collapse::{CollapseReport, DriftEntry};
use super::metrics::{acc_avg, performance_drop};
use crate::error::{Error, Result};
use crate::network::ParamCount;

pub const REPORT_FILE: &str = "report.json";
pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const CKA_FILE: &str = "cka.csv";
pub const DRIFT_FILE: &str = "drift.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Classes introduced by this stage's task.
    pub new_classes: Vec<usize>,
    pub num_classes: usize,
    /// Accuracy on the union of all seen test sets, in percent.
    pub accuracy: f64,
    /// Accuracy restricted to classes of earlier tasks.
    pub old_accuracy: Option<f64>,
    pub new_accuracy: Option<f64>,
    pub final_loss: f64,
    pub learning_rate: f64,
    /// Gram deviation of the ETF head after this stage's expansion.
    pub etf_gram_error: Option<f64>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub param_count: ParamCount,
    /// Pairwise CKA between expand-layer outputs `0..=stage` on the
    /// evaluation set.
    pub cka: Vec<Vec<f64>>,
    pub mean_cka: Option<f64>,
    pub collapse: Option<CollapseReport>,
    /// Old-class centroid displacement in head-input space since the
    /// previous stage.
    pub drift: Vec<DriftEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub seed: u64,
    pub wiring: String,
    pub head: String,
    pub adapt: bool,
    pub lambda: f64,
    pub dataset: String,
    pub accuracies: Vec<f64>,
    pub acc_avg: f64,
    /// `None` for single-task runs.
    pub performance_drop: Option<f64>,
    pub forbidden_reads: usize,
    pub stages: Vec<StageRecord>,
}

impl RunReport {
    /// Fills the summary fields from the stage records.
    pub fn finalize(&mut self) -> Result<()> {
        self.accuracies = self.stages.iter().map(|s| s.accuracy).collect();
        self.acc_avg = acc_avg(&self.accuracies)?;
        self.performance_drop = performance_drop(&self.accuracies).ok();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(format!("invalid report: {msg}")));
        if self.accuracies.is_empty() || self.accuracies.len() != self.stages.len() {
            return bad(format!("{} accuracies for {} stages", self.accuracies.len(), self.stages.len()));
        }
        for (t, (a, s)) in self.accuracies.iter().zip(&self.stages).enumerate() {
            if !(0.0..=100.0).contains(a) || *a != s.accuracy || s.stage != t {
                return bad(format!("stage {t} accuracy {a}"));
            }
            for row in &s.cka {
                if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return bad(format!("stage {t} CKA outside [0, 1]"));
                }
            }
        }
        if (acc_avg(&self.accuracies)? - self.acc_avg).abs() > 1e-9 {
            return bad(format!("acc_avg {} is not the mean accuracy", self.acc_avg));
        }
        let pd = performance_drop(&self.accuracies).ok();
        let pd_ok = match (pd, self.performance_drop) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
            (None, None) => true,
            _ => false,
        };
        if !pd_ok {
            return bad(format!("performance drop {:?} != first - last", self.performance_drop));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("report: {e}")))
    }

    /// Writes `report.json`, `accuracy.csv`, `cka.csv` and `drift.csv` into
    /// `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(REPORT_FILE);
        std::fs::write(&json, self.to_json()? + "\n").map_err(|e| Error::io(&json, e))?;
        write_csv(&dir.join(ACCURACY_FILE), &["stage", "num_classes", "accuracy", "old_accuracy", "new_accuracy"], self.stages.iter().map(|s| {
            vec![s.stage.to_string(), s.num_classes.to_string(), s.accuracy.to_string(), opt(s.old_accuracy), opt(s.new_accuracy)]
        }))?;
        write_csv(&dir.join(CKA_FILE), &["stage", "layer_i", "layer_j", "cka"], self.stages.iter().flat_map(|s| {
            s.cka.iter().enumerate().flat_map(move |(i, row)| {
                row.iter().enumerate().map(move |(j, v)| vec![s.stage.to_string(), i.to_string(), j.to_string(), v.to_string()])
            })
        }))?;
        write_csv(&dir.join(DRIFT_FILE), &["stage", "class", "displacement"], self.stages.iter().flat_map(|s| {
            s.drift.iter().map(move |d| vec![s.stage.to_string(), d.class.to_string(), opt(d.displacement)])
        }))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Contract(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
