//! Line-delimited JSON metrics: one [`RunRecord`] per line, written whole and
//! flushed before training continues.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use swr_core::protocols::RunRecord;

use crate::error::{CliError, Result};

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    rows: usize,
}

impl MetricsWriter {
    /// Starts a new log, replacing any file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, File::create(path))
    }

    /// Continues an existing log (used when resuming).
    pub fn append(path: &Path) -> Result<Self> {
        Self::open(path, OpenOptions::new().append(true).create(true).open(path))
    }

    fn open(path: &Path, file: std::io::Result<File>) -> Result<Self> {
        let file = file.map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            rows: 0,
        })
    }

    pub fn write(&mut self, row: &RunRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_string(row).map_err(std::io::Error::other)?;
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        self.out.flush()?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parses a metrics log. A final line without a terminating newline is the
/// remnant of an interrupted write and is ignored.
pub fn parse_metrics(text: &str) -> std::result::Result<Vec<RunRecord>, (usize, serde_json::Error)> {
    let complete = match text.rfind('\n') {
        Some(end) => &text[..end],
        None => "",
    };
    complete
        .split('\n')
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    parse_metrics(&text).map_err(|(line, e)| CliError::Other(format!("{}:{line}: {e}", path.display())))
}
