//! CSV tables: header row, LF line endings, no quoting (fields never
//! contain commas).

use std::path::Path;

use crate::error::{CilmpError, Result};

/// `%.6f`, the display format of metric columns.
pub fn fixed6(x: f64) -> String {
    format!("{x:.6}")
}

/// 17 significant digits, enough to parse back to the same `f64`.
pub fn exact(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        CsvTable {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(CilmpError::Config(format!(
                "row of {} fields for {} columns",
                row.len(),
                self.header.len()
            )));
        }
        if let Some(bad) = row.iter().find(|f| f.contains([',', '\n', '\r'])) {
            return Err(CilmpError::Config(format!("field {bad:?} needs quoting")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split_terminator('\n');
        let header = lines
            .next()
            .ok_or_else(|| CilmpError::format(0, "empty CSV"))?
            .split(',')
            .map(String::from)
            .collect::<Vec<_>>();
        let mut table = CsvTable { header, rows: Vec::new() };
        for line in lines {
            table.push(line.split(',').map(String::from).collect())?;
        }
        Ok(table)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric value of a cell.
    pub fn number(&self, row: usize, name: &str) -> Result<f64> {
        let col = self
            .column(name)
            .ok_or_else(|| CilmpError::Config(format!("no column `{name}`")))?;
        let cell = self
            .rows
            .get(row)
            .ok_or(CilmpError::Index { index: row, len: self.rows.len() })?;
        cell[col]
            .parse()
            .map_err(|e| CilmpError::Config(format!("cell {row}/{name} = {:?}: {e}", cell[col])))
    }
}
