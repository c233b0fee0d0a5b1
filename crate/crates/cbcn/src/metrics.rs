//! Append-only per-epoch metrics CSV: `epoch,split,loss,accuracy,lr,seconds`.
//!
//! `loss`, `accuracy` (a fraction) and `lr` use the shortest decimal that
//! round-trips the `f64`; `seconds` is wall-clock time since the run
//! started, with millisecond resolution.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use cbcn_core::train::EpochMetrics;

use crate::{Error, Result};

pub const HEADER: &str = "epoch,split,loss,accuracy,lr,seconds";

pub fn format_row(m: &EpochMetrics, seconds: f64) -> String {
    format!("{},{},{},{},{},{:.3}", m.epoch, m.split.name(), m.loss, m.accuracy, m.lr, seconds)
}

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Opens for appending, writing the header if the file is new or empty.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        if empty {
            writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, m: &EpochMetrics, seconds: f64) -> Result<()> {
        writeln!(self.file, "{}", format_row(m, seconds)).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// The CSV text with the `seconds` column blanked, for comparing runs.
pub fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rsplit_once(',') {
            Some((rest, _)) => format!("{rest},\n"),
            None => format!("{line}\n"),
        })
        .collect()
}
