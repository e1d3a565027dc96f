use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};

/// JSON-lines metrics log. Records are kept in memory and, when a path is
/// set, also written to disk as they arrive.
#[derive(Debug, Default)]
pub struct Metrics {
    records: Vec<Value>,
    out: Option<(PathBuf, BufWriter<File>)>,
}

impl Metrics {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            out: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn log(&mut self, record: Value) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

impl Drop for Metrics {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
