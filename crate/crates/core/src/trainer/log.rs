use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::MetricReport;

/// One training iteration: a supervised step and its unsupervised steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss_l: f64,
    pub loss_u: Option<f64>,
    pub lambda_mean: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    /// Mean fraction of pixels kept by the loss mask.
    pub mask_fraction: Option<f64>,
    pub val_iou: Option<f64>,
    pub val_dice: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_shallow_recall: Option<f64>,
    pub val_deep_recall: Option<f64>,
    /// Seconds since the run (or resumed run) started.
    pub wall_time: f64,
}

impl MetricsRow {
    pub fn set_validation(&mut self, r: &MetricReport) {
        self.val_iou = Some(r.iou);
        self.val_dice = Some(r.dice);
        self.val_accuracy = Some(r.accuracy);
        self.val_shallow_recall = (!r.shallow_undefined).then_some(r.shallow_recall);
        self.val_deep_recall = (!r.deep_undefined).then_some(r.deep_recall);
    }

    pub fn set_lambdas(&mut self, lambdas: &[f64], fractions: &[f64]) {
        if lambdas.is_empty() {
            return;
        }
        let n = lambdas.len() as f64;
        self.lambda_mean = Some(lambdas.iter().sum::<f64>() / n);
        self.lambda_min = Some(lambdas.iter().copied().fold(f64::INFINITY, f64::min));
        self.lambda_max = Some(lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        self.mask_fraction = Some(fractions.iter().sum::<f64>() / fractions.len().max(1) as f64);
    }
}

/// Append-only table of [`MetricsRow`]s, mirrored to a CSV file when a path
/// is attached. Each row is flushed as soon as it is pushed.
#[derive(Debug, Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
    path: Option<PathBuf>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Starts a fresh log file (truncating any existing one).
    pub fn create(path: &Path) -> Result<Self> {
        let log = Self {
            rows: Vec::new(),
            path: Some(path.to_path_buf()),
        };
        log.rewrite()?;
        Ok(log)
    }

    /// Reopens a log, dropping rows after `last_step` so a resumed run
    /// continues without gaps or duplicates.
    pub fn resume(path: &Path, last_step: u64) -> Result<Self> {
        let mut rows = if path.exists() { read_rows(path)? } else { Vec::new() };
        rows.retain(|r| r.step <= last_step);
        let log = Self {
            rows,
            path: Some(path.to_path_buf()),
        };
        log.rewrite()?;
        Ok(log)
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            ensure!(row.step > last.step, "log step {} does not follow {}", row.step, last.step);
        }
        if let Some(p) = &self.path {
            let file = OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            w.serialize(&row).map_err(|e| Error::format(p, e.to_string()))?;
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    /// Replaces the last row (used to attach validation results).
    pub fn amend_last(&mut self, f: impl FnOnce(&mut MetricsRow)) -> Result<()> {
        if let Some(r) = self.rows.last_mut() {
            f(r);
            self.rewrite()?;
        }
        Ok(())
    }

    fn rewrite(&self) -> Result<()> {
        let Some(p) = &self.path else { return Ok(()) };
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(p, e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::format(p, e.to_string()))?;
        let mut text = header().into_bytes();
        text.extend(body);
        std::fs::write(p, text).map_err(|e| Error::io(p, e))
    }
}

fn header() -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(MetricsRow::default()).expect("row serializes");
    let text = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8");
    format!("{}\n", text.lines().next().unwrap_or_default())
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
