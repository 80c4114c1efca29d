//! Report tables and their CSV/JSON emission.
//!
//! Data rows depend only on the configuration and seed. Anything that varies
//! between runs (wall time, timings) lives in the metadata or in a table
//! marked volatile, so reruns can be compared byte for byte.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Format, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
    Empty,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Float(v) if *v == 0.0 || !v.is_finite() => write!(f, "{v}"),
            Cell::Float(v) if (1e-4..1e6).contains(&v.abs()) => write!(f, "{v}"),
            Cell::Float(v) => write!(f, "{v:e}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Bool(b) => write!(f, "{b}"),
            Cell::Empty => Ok(()),
        }
    }
}

impl Cell {
    fn to_json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Float(v) if v.is_finite() => json!(v),
            Cell::Float(v) => json!(v.to_string()),
            Cell::Text(s) => json!(s),
            Cell::Bool(b) => json!(b),
            Cell::Empty => Value::Null,
        }
    }
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
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
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

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// Holds measurements (such as timings) that differ between reruns.
    pub volatile: bool,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table { name: name.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new(), volatile: false }
    }

    pub fn volatile(mut self) -> Self {
        self.volatile = true;
        self
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.to_string()))
    }

    fn to_json(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|row| {
                    Value::Object(self.columns.iter().cloned().zip(row.iter().map(Cell::to_json)).collect::<Map<_, _>>())
                })
                .collect(),
        )
    }

    /// Cells of the named column.
    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[j]).collect())
    }
}

/// One internal assertion of a subcommand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub command: String,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    /// Nested records emitted only in the JSON form.
    pub records: Vec<Value>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report { command: command.to_string(), tables: Vec::new(), checks: Vec::new(), notes: Vec::new(), records: Vec::new() }
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn checks_table(&self) -> Table {
        let mut t = Table::new("checks", &["check", "passed", "detail"]);
        for c in &self.checks {
            t.push(vec![c.name.clone().into(), c.passed.into(), c.detail.clone().into()]);
        }
        t
    }

    fn csv_name(&self, table: &Table) -> String {
        if table.name == self.command {
            format!("{}.csv", self.command)
        } else {
            format!("{}_{}.csv", self.command, table.name)
        }
    }

    /// Writes the report into `dir` and returns the paths written.
    pub fn write(&self, dir: &Path, format: Format, config: &RunConfig, wall_ms: u64) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let mut written = Vec::new();
        let checks = self.checks_table();
        if format.csv() {
            for table in self.tables.iter().chain(std::iter::once(&checks)) {
                let path = dir.join(self.csv_name(table));
                write_atomic(&path, &table.to_csv()?)?;
                written.push(path);
            }
        }
        if format.json() {
            let meta = Meta {
                tool: "loract",
                version: env!("CARGO_PKG_VERSION"),
                command: self.command.clone(),
                seed: config.seed,
                config_hash: config.hash(),
                wall_ms,
            };
            let tables: Map<String, Value> = self.tables.iter().map(|t| (t.name.clone(), t.to_json())).collect();
            let doc = json!({
                "meta": meta,
                "config": config,
                "passed": self.passed(),
                "checks": self.checks,
                "notes": self.notes,
                "tables": tables,
                "records": self.records,
            });
            let mut bytes = serde_json::to_vec_pretty(&doc)?;
            bytes.push(b'\n');
            let path = dir.join(format!("{}.json", self.command));
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_compact_and_stable() {
        assert_eq!(Cell::Float(0.5).to_string(), "0.5");
        assert_eq!(Cell::Float(1e-20).to_string(), "1e-20");
        assert_eq!(Cell::Float(0.0).to_string(), "0");
        assert_eq!(Cell::Float(2.5e7).to_string(), "2.5e7");
        assert_eq!(Cell::from(None::<usize>).to_string(), "");
    }

    #[test]
    fn csv_and_json_agree() {
        let mut t = Table::new("x", &["a", "b"]);
        t.push(vec![1usize.into(), "q,r".into()]);
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "a,b\n1,\"q,r\"\n");
        assert_eq!(t.to_json(), json!([{"a": 1, "b": "q,r"}]));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn report_writes_all_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Report::new("demo");
        let mut t = Table::new("demo", &["v"]);
        t.push(vec![0.25.into()]);
        r.tables.push(t);
        r.check("ok", true, "");
        let paths = r.write(dir.path(), Format::Both, &RunConfig::default(), 3).unwrap();
        let names: Vec<_> = paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["demo.csv", "demo_checks.csv", "demo.json"]);
        let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("demo.json")).unwrap()).unwrap();
        assert_eq!(doc["meta"]["config_hash"], json!(RunConfig::default().hash()));
        assert_eq!(doc["tables"]["demo"][0]["v"], json!(0.25));
    }
}
