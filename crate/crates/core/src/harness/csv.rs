//! Plain CSV output. Floats are written with 17 significant digits so every
//! value reads back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
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

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn render(cell: &Cell, out: &mut String) {
    match cell {
        Cell::Int(v) => write!(out, "{v}").unwrap(),
        Cell::Float(v) => out.push_str(&format_float(*v)),
        Cell::Text(s) => out.push_str(s),
    }
}

/// Renders a header line and one line per row, each newline-terminated.
pub fn to_csv_string(header: &[&str], rows: &[Vec<Cell>]) -> Result<String> {
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Argument(format!(
                "row {i} has {} cells, header has {}",
                row.len(),
                header.len()
            )));
        }
        for (j, cell) in row.iter().enumerate() {
            if let Cell::Text(s) = cell {
                if s.contains([',', '\n', '"']) {
                    return Err(Error::Argument(format!("text cell {s:?} needs quoting")));
                }
            }
            if j > 0 {
                out.push(',');
            }
            render(cell, &mut out);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    let text = to_csv_string(header, rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Header and raw string cells of a CSV file written by [`emit_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}
