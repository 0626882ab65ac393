use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::error::Result;

/// One line of the step log. `beta` is `None` while the prior is off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub nuc_norm: f64,
    pub beta: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_loss: f64,
    pub mean_nuc_norm: f64,
    pub beta: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochSummary {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,mean_nuc_norm,beta,lr";

    pub fn csv_row(&self) -> String {
        let beta = self.beta.map_or_else(|| "inf".to_string(), |b| b.to_string());
        format!("{},{},{},{},{}", self.epoch, self.mean_loss, self.mean_nuc_norm, beta, self.lr)
    }
}

/// Receives training progress. `on_epoch` sees the state after the epoch.
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _state: &TrainState, _summary: &EpochSummary) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Recorder {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl Observer for Recorder {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }

    fn on_epoch(&mut self, _state: &TrainState, summary: &EpochSummary) -> Result<()> {
        self.epochs.push(summary.clone());
        Ok(())
    }
}

/// Streams the JSON-lines step log and the per-epoch CSV summary.
pub struct MetricsWriter {
    steps: BufWriter<File>,
    summary: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates (or appends to, when `append`) both files.
    pub fn open(steps_path: &Path, summary_path: &Path, append: bool) -> Result<Self> {
        let open = |p: &Path| {
            std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
        };
        let fresh = !append || std::fs::metadata(summary_path).map_or(true, |m| m.len() == 0);
        let mut summary = BufWriter::new(open(summary_path)?);
        if fresh {
            writeln!(summary, "{}", EpochSummary::CSV_HEADER)?;
        }
        Ok(Self {
            steps: BufWriter::new(open(steps_path)?),
            summary,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.steps.flush()?;
        self.summary.flush()?;
        Ok(())
    }
}

impl Observer for MetricsWriter {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.steps, record).map_err(std::io::Error::from)?;
        self.steps.write_all(b"\n")?;
        Ok(())
    }

    fn on_epoch(&mut self, _state: &TrainState, summary: &EpochSummary) -> Result<()> {
        writeln!(self.summary, "{}", summary.csv_row())?;
        self.flush()
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
