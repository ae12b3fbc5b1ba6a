//! CSV tables and JSON summaries.
//!
//! Floats are written with 17 significant digits (`{:.16e}`), which round
//! trips every `f64` exactly, so identical runs give identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: missing column {column}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// A numeric table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Columns written as integers.
    int_columns: Vec<bool>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            int_columns: vec![false; header.len()],
        }
    }

    /// Mark columns that hold indices.
    pub fn with_int_columns(mut self, names: &[&str]) -> Self {
        for (i, h) in self.header.iter().enumerate() {
            if names.contains(&h.as_str()) {
                self.int_columns[i] = true;
            }
        }
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write(&self, path: &Path) -> Result<(), OutputError> {
        let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
        let mut text = self.header.join(",");
        text.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&self.int_columns)
                .map(|(&v, &int)| if int { format!("{}", v as i64) } else { fmt_f64(v) })
                .collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(io_err(path))?;
        f.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, OutputError> {
        let r = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut lines = r.lines();
        let header: Vec<String> = match lines.next() {
            Some(l) => l.map_err(io_err(path))?.split(',').map(|s| s.trim().to_string()).collect(),
            None => {
                return Err(OutputError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: "empty file".into(),
                })
            }
        };
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| OutputError::Parse {
                path: path.to_path_buf(),
                line: k + 2,
                msg: e.to_string(),
            })?;
            if row.len() != header.len() {
                return Err(OutputError::Parse {
                    path: path.to_path_buf(),
                    line: k + 2,
                    msg: format!("expected {} fields, found {}", header.len(), row.len()),
                });
            }
            rows.push(row);
        }
        let n = header.len();
        Ok(Self {
            header,
            rows,
            int_columns: vec![false; n],
        })
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<Vec<f64>, OutputError> {
        self.column(name).ok_or_else(|| OutputError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn create_dir(path: &Path) -> Result<(), OutputError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut t = Table::new(&["step", "x"]).with_int_columns(&["step"]);
        t.push(vec![0.0, 0.1]);
        t.push(vec![1.0, 1.0 / 3.0]);
        t.push(vec![2.0, f64::NAN]);
        t.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,x\n0,1.0000000000000001e-1\n"));
        let back = Table::read(&p).unwrap();
        assert_eq!(back.header, t.header);
        assert_eq!(back.rows[1][1], 1.0 / 3.0);
        assert!(back.rows[2][1].is_nan());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "a,b\n1,2\n3,x\n").unwrap();
        let e = Table::read(&p).unwrap_err().to_string();
        assert!(e.contains(":3:"), "{}", e);
    }
}
