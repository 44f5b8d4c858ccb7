//! Line-delimited metrics stream shared by every training stage.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Collects metric records in memory and optionally appends them to a
/// `.jsonl` file as they arrive. Record order is append order.
pub struct MetricsSink {
    records: Vec<MetricRecord>,
    writer: Option<BufWriter<File>>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self {
            records: Vec::new(),
            writer: None,
        }
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            records: Vec::new(),
            writer: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn log(&mut self, stage: &str, epoch: usize, split: &str, metric: &str, value: f64) {
        let rec = MetricRecord {
            stage: stage.to_string(),
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        };
        if let Some(w) = &mut self.writer {
            // metrics are diagnostics; IO failures surface at flush
            let _ = serde_json::to_writer(&mut *w, &rec);
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
        self.records.push(rec);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Values of one (stage, split, metric) series in log order.
    pub fn series(&self, stage: &str, split: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

impl Drop for MetricsSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
