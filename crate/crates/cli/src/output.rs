//! Run output directory: `config.snapshot`, `metrics.jsonl` and tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lqf::{LqfError, Result};
use serde_json::{Map, Value};

use crate::config::Config;

pub struct Output {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Output {
    /// Creates the directory and writes the resolved config before anything runs.
    pub fn create(dir: &Path, cfg: &Config, command: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.snapshot"), cfg.snapshot(command))?;
        let metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Output { dir: dir.to_path_buf(), metrics })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Appends one JSON object tagged with `kind`.
    pub fn metric(&mut self, kind: &str, value: Value) -> Result<()> {
        let mut map = Map::new();
        map.insert("kind".into(), Value::String(kind.into()));
        match value {
            Value::Object(fields) => map.extend(fields),
            other => {
                map.insert("value".into(), other);
            }
        }
        let line = serde_json::to_string(&Value::Object(map)).map_err(|e| LqfError::Format(e.to_string()))?;
        writeln!(self.metrics, "{line}")?;
        Ok(())
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        Ok(())
    }
}

/// CSV text from a header and rows of preformatted cells.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| LqfError::Format(e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| LqfError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| LqfError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Round-trip float formatting for tables.
pub fn real(v: f64) -> String {
    format!("{v:?}")
}

/// JSON number, or `null` for non-finite values.
pub fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}
