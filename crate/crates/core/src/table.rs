//! Small column-named table of optional string cells, read from and
//! written to CSV. Numeric views are parsed on demand.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Cell spellings treated as missing.
pub const MISSING: [&str; 4] = ["", "NA", "NaN", "nan"];

pub fn is_missing(s: &str) -> bool {
    MISSING.contains(&s.trim())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    names: Vec<String>,
    rows: Vec<Vec<Option<String>>>,
}

impl Table {
    pub fn new(names: Vec<String>, rows: Vec<Vec<Option<String>>>) -> Result<Self> {
        if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
            return Err(Error::invalid("duplicate column name"));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != names.len()) {
            return Err(Error::MalformedRecord {
                line: i + 2,
                reason: format!("expected {} cells, found {}", names.len(), rows[i].len()),
            });
        }
        Ok(Table { names, rows })
    }

    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::MalformedRecord {
                line: i + 2,
                reason: e.to_string(),
            })?;
            rows.push(
                rec.iter()
                    .map(|c| (!is_missing(c)).then(|| c.trim().to_string()))
                    .collect(),
            );
        }
        Self::new(names, rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    /// Missing cells are written as `NA`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.as_deref().unwrap_or("NA")))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        self.rows[row][col].as_deref()
    }

    pub fn text(&self, name: &str) -> Result<Vec<Option<&str>>> {
        let j = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[j].as_deref()).collect())
    }

    /// Parses every present cell as a float; `true`/`false` read as 1/0.
    pub fn numeric(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let j = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r[j].as_deref() {
                None => Ok(None),
                Some(s) => parse_number(s).map(Some).ok_or_else(|| Error::MalformedRecord {
                    line: i + 2,
                    reason: format!("column `{name}`: `{s}` is not a number"),
                }),
            })
            .collect()
    }

    /// Appends or replaces a column.
    pub fn set_column(&mut self, name: &str, values: Vec<Option<String>>) -> Result<()> {
        if values.len() != self.rows.len() {
            return Err(Error::invalid(format!(
                "column `{name}` has {} values for {} rows",
                values.len(),
                self.rows.len()
            )));
        }
        match self.names.iter().position(|n| n == name) {
            Some(j) => {
                for (r, v) in self.rows.iter_mut().zip(values) {
                    r[j] = v;
                }
            }
            None => {
                self.names.push(name.to_string());
                for (r, v) in self.rows.iter_mut().zip(values) {
                    r.push(v);
                }
            }
        }
        Ok(())
    }

    /// Rows whose index satisfies `keep`.
    pub fn filter_rows(&self, mut keep: impl FnMut(usize) -> bool) -> Table {
        Table {
            names: self.names.clone(),
            rows: (0..self.rows.len()).filter(|&i| keep(i)).map(|i| self.rows[i].clone()).collect(),
        }
    }
}

/// Shortest round-trip text for `x`; scientific notation outside
/// `[1e-5, 1e16)` so tiny p-values stay short.
pub fn format_number(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

pub fn parse_number(s: &str) -> Option<f64> {
    match s.trim() {
        "true" | "TRUE" | "True" => Some(1.0),
        "false" | "FALSE" | "False" => Some(0.0),
        t => t.parse::<f64>().ok().filter(|v| v.is_finite()),
    }
}
