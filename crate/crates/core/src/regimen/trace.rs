use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub batch: usize,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

/// Per-batch metric history. Within one stage, the batch index of each
/// metric series strictly increases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    records: Vec<TraceRecord>,
}

impl MetricTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stage: &str, batch: usize, metric: &str, value: f64, seconds: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{stage}/{metric} at batch {batch}")));
        }
        if let Some(prev) = self
            .records
            .iter()
            .rev()
            .find(|r| r.stage == stage && r.metric == metric)
        {
            if batch <= prev.batch {
                return Err(Error::InvalidConfig(format!(
                    "{stage}/{metric}: batch {batch} does not follow {}",
                    prev.batch
                )));
            }
        }
        self.records.push(TraceRecord {
            stage: stage.to_owned(),
            batch,
            metric: metric.to_owned(),
            value,
            seconds,
        });
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn extend(&mut self, other: MetricTrace) {
        self.records.extend(other.records);
    }

    /// `(batch, value)` series of one metric.
    pub fn series(&self, stage: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.metric == metric)
            .map(|r| (r.batch, r.value))
            .collect()
    }

    pub fn last(&self, stage: &str, metric: &str) -> Option<f64> {
        self.series(stage, metric).last().map(|&(_, v)| v)
    }

    /// CSV with header `stage,batch,metric,value,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        writeln!(out, "stage,batch,metric,value,seconds").expect("write to Vec");
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.stage, r.batch, r.metric, r.value, r.seconds)
                .expect("write to Vec");
        }
        String::from_utf8(out).expect("ascii")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
