//! File formats: point-pattern CSV with a JSON sidecar, labelled datasets,
//! embedding/ROC/scree tables and the JSON result envelope.
//!
//! Reals are written in Rust's shortest round-trip form, so reading a file
//! back gives bitwise-identical values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dimred::{Dataset, Labels, ProjectionResult, RocCurve};
use crate::error::{Error, Result};
use crate::kernel::ScatteringMatrix;
use crate::sampler::{PointPattern, Window};

/// Version of the JSON envelope layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Shortest text that parses back to exactly `v`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Pretty-printed JSON followed by a newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Sidecar of a pattern CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMeta {
    pub window: Window,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<ScatteringMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

/// `points.csv` → `points.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `x1..xd` rows to `path` and the metadata to its sidecar.
pub fn write_pattern(path: &Path, pattern: &PointPattern, meta: &PatternMeta) -> Result<()> {
    if meta.window != *pattern.window() {
        return Err(Error::invalid("meta", "window differs from the pattern's window"));
    }
    let mut w = csv_writer(path)?;
    w.write_record((1..=pattern.dim()).map(|i| format!("x{i}")))?;
    for p in pattern.points() {
        w.write_record(p.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_json(&sidecar_path(path), meta)
}

/// Reads a pattern CSV and its sidecar.
pub fn read_pattern(path: &Path) -> Result<(PointPattern, PatternMeta)> {
    let meta: PatternMeta = read_json(&sidecar_path(path))?;
    let d = meta.window.dim();
    let mut r = csv_reader(path)?;
    let header = r.headers()?.clone();
    if header.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: header.len(),
        });
    }
    let mut coords = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            coords.push(parse_cell(cell, row + 1, &header[j])?);
        }
    }
    Ok((PointPattern::new(coords, meta.window)?, meta))
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::ParseCell {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        })
}

/// Reads a CSV with a header row. Every column other than `label_column`
/// is a numeric feature.
///
/// With `positive_label`, labels become binary: that value is the positive
/// class and exactly one other value may appear. Without it, labels are
/// kept as categories. Data rows are numbered from 1 in errors.
pub fn load_dataset(path: &Path, label_column: Option<&str>, positive_label: Option<&str>) -> Result<Dataset> {
    if positive_label.is_some() && label_column.is_none() {
        return Err(Error::invalid("positive_label", "requires a label column"));
    }
    let mut r = csv_reader(path)?;
    let header = r.headers()?.clone();
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?,
        ),
        None => None,
    };
    let feature_idx: Vec<usize> = (0..header.len()).filter(|&j| Some(j) != label_idx).collect();
    let names: Vec<String> = feature_idx.iter().map(|&j| header[j].to_string()).collect();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        for &j in &feature_idx {
            values.push(parse_cell(&rec[j], row + 1, &header[j])?);
        }
        if let Some(j) = label_idx {
            raw_labels.push(rec[j].to_string());
        }
    }
    let n = raw_labels.len().max(if feature_idx.is_empty() { 0 } else { values.len() / feature_idx.len() });
    let features = DMatrix::from_row_slice(n, feature_idx.len(), &values);

    let labels = match (label_idx, positive_label) {
        (None, _) => None,
        (Some(_), None) => Some(Labels::Categorical(raw_labels)),
        (Some(_), Some(pos)) => {
            let mut negative: Option<&str> = None;
            let mut out = Vec::with_capacity(raw_labels.len());
            for v in &raw_labels {
                if v == pos {
                    out.push(true);
                } else if negative.map_or(true, |neg| neg == v) {
                    negative = Some(v);
                    out.push(false);
                } else {
                    return Err(Error::UnknownLabel {
                        value: v.clone(),
                        positive: pos.to_string(),
                    });
                }
            }
            Some(Labels::Binary(out))
        }
    };
    Dataset::new(features, labels, Some(names))
}

/// Public benchmark layouts accepted by [`check_benchmark_shape`].
///
/// * `Wbc`: Wisconsin Diagnostic Breast Cancer, 569 rows, a `diagnosis`
///   column (`M`/`B`) and 30 numeric feature columns.
/// * `Iris`: Fisher's Iris, 150 rows, a `species` column and 4 numeric
///   feature columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Wbc,
    Iris,
}

impl Benchmark {
    /// `(rows, feature columns)`.
    pub fn shape(self) -> (usize, usize) {
        match self {
            Benchmark::Wbc => (569, 30),
            Benchmark::Iris => (150, 4),
        }
    }

    pub fn label_column(self) -> &'static str {
        match self {
            Benchmark::Wbc => "diagnosis",
            Benchmark::Iris => "species",
        }
    }
}

/// Fails unless the dataset has the benchmark's row and feature counts.
pub fn check_benchmark_shape(dataset: &Dataset, benchmark: Benchmark) -> Result<()> {
    let (rows, cols) = benchmark.shape();
    if dataset.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: dataset.len(),
        });
    }
    if dataset.dim() != cols {
        return Err(Error::DimensionMismatch {
            expected: cols,
            found: dataset.dim(),
        });
    }
    Ok(())
}

/// Writes a dataset in the layout [`load_dataset`] reads, with labels (if
/// any) in a trailing `label` column.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = match dataset.feature_names() {
        Some(n) => n.to_vec(),
        None => (1..=dataset.dim()).map(|i| format!("f{i}")).collect(),
    };
    if dataset.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features().row(i).iter().map(|&v| fmt_f64(v)).collect();
        if let Some(l) = dataset.labels() {
            rec.push(l.display(i));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `id, coord1..coordk[, label]`, one row per dataset row; ids start at 0.
pub fn write_embedding(path: &Path, result: &ProjectionResult, labels: Option<&Labels>) -> Result<()> {
    let k = result.coords.ncols();
    let mut w = csv_writer(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((1..=k).map(|i| format!("coord{i}")));
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..result.coords.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend(result.coords.row(i).iter().map(|&v| fmt_f64(v)));
        if let Some(l) = labels {
            rec.push(l.display(i));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores and binary labels read back from an embedding CSV.
pub struct EmbeddingColumn {
    pub coords: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Reads column `coord{component}` (1-based) and the `label` column, with
/// `positive` marking the positive class.
pub fn read_embedding_column(path: &Path, component: usize, positive: &str) -> Result<EmbeddingColumn> {
    let mut r = csv_reader(path)?;
    let header = r.headers()?.clone();
    let name = format!("coord{component}");
    let cj = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.clone()))?;
    let lj = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::MissingColumn("label".into()))?;
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        coords.push(parse_cell(&rec[cj], row + 1, &name)?);
        labels.push(&rec[lj] == positive);
    }
    Ok(EmbeddingColumn { coords, labels })
}

/// `rank, eigenvalue`.
pub fn write_scree(path: &Path, scree: &[(usize, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["rank", "eigenvalue"])?;
    for &(i, v) in scree {
        w.write_record([i.to_string(), fmt_f64(v)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `threshold, fpr, tpr`; the origin's threshold is written as `inf`.
pub fn write_roc(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in &roc.points {
        w.write_record([fmt_f64(p.threshold), fmt_f64(p.fpr), fmt_f64(p.tpr)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// JSON wrapper written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope<T> {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The run configuration: `argv` (without the program name) and the
    /// parsed arguments.
    pub config: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub payload: T,
}

impl<T> ResultEnvelope<T> {
    pub fn new(command: &str, config: serde_json::Value, wall_clock_seconds: f64, payload: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            wall_clock_seconds,
            payload,
        }
    }
}
