//! Minimal CSV emitter. Cells are plain numbers or bare identifiers (no
//! commas, quotes or newlines), so no quoting layer is needed; floats use
//! Rust's shortest round-trip formatting, which keeps reruns byte-comparable.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Debug)]
pub struct CsvDoc {
    buf: String,
    columns: usize,
}

/// One CSV cell; conversions exist for the types the commands log.
#[derive(Debug, Clone)]
pub enum Cell {
    Text(String),
    Int(u64),
    Float(f64),
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl CsvDoc {
    pub fn new(header: &[&str]) -> Self {
        assert!(!header.is_empty());
        let mut buf = String::new();
        buf.push_str(&header.join(","));
        buf.push('\n');
        CsvDoc { buf, columns: header.len() }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        assert_eq!(cells.len(), self.columns, "row width != header width");
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            match cell {
                Cell::Text(s) => {
                    debug_assert!(!s.contains([',', '"', '\n']), "cell needs quoting: {s}");
                    self.buf.push_str(s);
                }
                Cell::Int(v) => {
                    let _ = write!(self.buf, "{v}");
                }
                Cell::Float(v) => {
                    let _ = write!(self.buf, "{v}");
                }
            }
        }
        self.buf.push('\n');
    }

    pub fn contents(&self) -> &str {
        &self.buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf.as_bytes())
            .map_err(|e| CliError::Output { path: path.to_path_buf(), source: e })
    }
}
