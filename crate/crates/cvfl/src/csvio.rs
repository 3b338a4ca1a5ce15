//! CSV ingestion of feature tables and the `metrics.csv` format.

use std::fmt::Write as _;
use std::path::Path;

use cvfl_core::protocol::{MetricsSeries, RoundMetrics};
use cvfl_core::Matrix;

use crate::error::{Error, Result};

/// Features and integer labels read from a table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub feature_names: Vec<String>,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

fn csv_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, csv::Position::line)
}

fn from_csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, csv::Position::line);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            csv_error(path, line, format!("expected {expected_len} fields, found {len}"))
        }
        other => csv_error(path, line, format!("{other:?}")),
    }
}

/// Reads a comma-separated table with a header row; `label_column` names the
/// integer label column and every other column is a feature.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| from_csv_error(path, e))?;
    let header = reader.headers().map_err(|e| from_csv_error(path, e))?.clone();
    let label_at = header
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| csv_error(path, 1, format!("no column named {label_column:?}")))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_at)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| from_csv_error(path, e))?;
        let line = record_line(&record);
        for (i, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if i == label_at {
                let y: usize = cell
                    .parse()
                    .map_err(|_| csv_error(path, line, format!("label {cell:?} is not a non-negative integer")))?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| csv_error(path, line, format!("{cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(csv_error(path, line, format!("{cell:?} is not finite")));
                }
                data.push(v);
            }
        }
    }
    let features = Matrix::from_vec(labels.len(), feature_names.len(), data)?;
    Ok(Table {
        feature_names,
        features,
        labels,
    })
}

/// Writes a table that [`load_csv`] reads back exactly (shortest round-trip
/// float formatting).
pub fn write_csv(path: &Path, table: &Table, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| from_csv_error(path, e))?;
    let mut header: Vec<&str> = table.feature_names.iter().map(String::as_str).collect();
    header.push(label_column);
    w.write_record(&header).map_err(|e| from_csv_error(path, e))?;
    for (r, y) in table.labels.iter().enumerate() {
        let mut row: Vec<String> = table.features.row(r).iter().map(f64::to_string).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(|e| from_csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One parsed `metrics.csv` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub loss: f64,
    pub grad_sq_norm: f64,
    /// `err_party_0..err_party_M`; entry 0 is the server parameters.
    pub errors: Vec<f64>,
    pub up_bytes: u64,
    pub down_bytes: u64,
    pub step_size: f64,
    pub ms: f64,
}

impl From<&RoundMetrics> for MetricsRow {
    fn from(r: &RoundMetrics) -> Self {
        MetricsRow {
            round: r.round,
            loss: r.loss,
            grad_sq_norm: r.grad_sq_norm,
            errors: r.errors.clone(),
            up_bytes: r.bytes.up,
            down_bytes: r.bytes.down,
            step_size: r.step_size,
            ms: r.ms,
        }
    }
}

pub fn metrics_header(parties: usize) -> String {
    let mut h = String::from("round,loss,grad_sq_norm");
    for m in 0..=parties {
        let _ = write!(h, ",err_party_{m}");
    }
    h.push_str(",up_bytes,down_bytes,step_size,ms");
    h
}

/// Renders a series as `metrics.csv` text.
pub fn metrics_csv(series: &MetricsSeries, parties: usize) -> String {
    let mut out = metrics_header(parties);
    out.push('\n');
    for r in &series.rows {
        let _ = write!(out, "{},{},{}", r.round, r.loss, r.grad_sq_norm);
        for e in &r.errors {
            let _ = write!(out, ",{e}");
        }
        let _ = writeln!(out, ",{},{},{},{}", r.bytes.up, r.bytes.down, r.step_size, r.ms);
    }
    out
}

/// Parses `metrics.csv` text back into rows. `source` names the input in
/// error messages.
pub fn parse_metrics(text: &str, source: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| from_csv_error(source, e))?.clone();
    let n = header.len();
    if n < 8 {
        return Err(csv_error(source, 1, "too few columns for a metrics file"));
    }
    let parties = n - 8;
    if header.iter().collect::<Vec<_>>().join(",") != metrics_header(parties) {
        return Err(csv_error(source, 1, "unexpected metrics header"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| from_csv_error(source, e))?;
        let line = record_line(&record);
        let field = |i: usize| record.get(i).unwrap_or("");
        let f = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| csv_error(source, line, format!("column {} is not a number", header.get(i).unwrap_or("?"))))
        };
        let u = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| csv_error(source, line, format!("column {} is not an integer", header.get(i).unwrap_or("?"))))
        };
        rows.push(MetricsRow {
            round: u(0)? as usize,
            loss: f(1)?,
            grad_sq_norm: f(2)?,
            errors: (3..3 + parties + 1).map(f).collect::<Result<_>>()?,
            up_bytes: u(n - 4)?,
            down_bytes: u(n - 3)?,
            step_size: f(n - 2)?,
            ms: f(n - 1)?,
        });
    }
    Ok(rows)
}
