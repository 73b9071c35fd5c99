//! Result tables: CSV with a `#` comment preamble, plus a JSON mirror.

use serde_json::{Map, Number, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing header row")]
    MissingHeader,
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("record {record}: expected {expected} fields, got {got}")]
    Ragged { record: usize, expected: usize, got: usize },
    #[error("malformed comment line `{0}`")]
    BadComment(String),
    #[error("table does not re-emit identically (first difference at byte {0})")]
    NotCanonical(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    /// `key: value` pairs written as leading comment lines.
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-tripping decimal form.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() && x != 0.0 && (x.abs() < 1e-4 || x.abs() >= 1e15) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table {
            meta: Vec::new(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cells of one column parsed as numbers (blank cells become NaN).
    pub fn numbers(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column(name)?;
        Some(self.rows.iter().map(|r| r[i].parse().unwrap_or(f64::NAN)).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells"));
        out
    }

    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut meta = Vec::new();
        let mut rest = text;
        while let Some(line) = rest.strip_prefix('#') {
            let (line, tail) = line.split_once('\n').unwrap_or((line, ""));
            let (k, v) = line
                .strip_prefix(' ')
                .and_then(|l| l.split_once(": "))
                .ok_or_else(|| TableError::BadComment(format!("#{line}")))?;
            meta.push((k.to_string(), v.to_string()));
            rest = tail;
        }
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(rest.as_bytes());
        let mut records = r.records();
        let header = records.next().ok_or(TableError::MissingHeader)??;
        let columns: Vec<String> = header.iter().map(str::to_string).collect();
        if columns.is_empty() || columns.iter().all(String::is_empty) {
            return Err(TableError::MissingHeader);
        }
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(TableError::DuplicateColumn(c.clone()));
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(TableError::Ragged {
                    record: i + 1,
                    expected: columns.len(),
                    got: rec.len(),
                });
            }
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { meta, columns, rows })
    }

    /// Parses and checks that re-emitting reproduces `text` byte for byte.
    pub fn validate(text: &str) -> Result<Self, TableError> {
        let t = Self::parse(text)?;
        let again = t.to_csv();
        if again != text {
            let at = again
                .bytes()
                .zip(text.bytes())
                .position(|(a, b)| a != b)
                .unwrap_or(again.len().min(text.len()));
            return Err(TableError::NotCanonical(at));
        }
        Ok(t)
    }

    /// Rows as an array of objects; numeric cells become JSON numbers and
    /// blank cells become null.
    pub fn to_json_value(&self) -> Value {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let obj: Map<String, Value> = self
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(c, cell)| (c.clone(), cell_value(cell)))
                    .collect();
                Value::Object(obj)
            })
            .collect();
        Value::Array(rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("serializable") + "\n"
    }
}

fn cell_value(cell: &str) -> Value {
    if cell.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = cell.parse::<i64>() {
        return Value::Number(i.into());
    }
    if let Ok(x) = cell.parse::<f64>() {
        if let Some(n) = Number::from_f64(x) {
            return Value::Number(n);
        }
    }
    match cell {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(cell.to_string()),
    }
}
