//! Series as CSV: header `t,y_0,...,y_{N-1}[,label]`, one row per step.
//!
//! Floats are written in Rust's shortest round-trip form, so export then
//! ingest reproduces every value exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffmath::Matrix;
use crate::error::{GdmError, Result};
use crate::model::ObsSeries;

/// How to read a CSV into a series.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Column used to order rows; ignored when absent from the header.
    pub time_column: Option<String>,
    /// Label column; when absent from the header the series is unlabelled
    /// unless `classes` is given.
    pub label_column: Option<String>,
    /// Observation columns in order; `None` takes every other column.
    pub columns: Option<Vec<String>>,
    /// Allowed label values; label `i` is `classes[i]`. `None` accepts
    /// non-negative integers.
    pub classes: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            time_column: Some("t".into()),
            label_column: Some("label".into()),
            columns: None,
            classes: None,
        }
    }
}

pub fn write_series_csv<W: Write>(series: &ObsSeries, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let n = series.dim();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..n).map(|j| format!("y_{j}")));
    if series.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut rec: Vec<String> = vec![t.to_string()];
        rec.extend(series.y.row(t).iter().map(|v| v.to_string()));
        if let Some(l) = &series.labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_series_csv(series: &ObsSeries, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| GdmError::Io(format!("{}: {e}", path.display())))?;
    write_series_csv(series, std::io::BufWriter::new(f))
}

/// Reads a series; errors name the offending 1-based data row.
pub fn read_series_csv<R: Read>(input: R, schema: &CsvSchema) -> Result<ObsSeries> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(GdmError::Data("empty file: no header".into()));
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let time_idx = schema.time_column.as_deref().and_then(find);
    let label_idx = match schema.label_column.as_deref() {
        Some(name) => match find(name) {
            Some(i) => Some(i),
            None if schema.classes.is_some() => {
                return Err(GdmError::Data(format!("label column '{name}' not found")));
            }
            None => None,
        },
        None => None,
    };
    let obs_idx: Vec<usize> = match &schema.columns {
        Some(cols) => cols
            .iter()
            .map(|c| find(c).ok_or_else(|| GdmError::Data(format!("column '{c}' not found"))))
            .collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&i| Some(i) != time_idx && Some(i) != label_idx)
            .collect(),
    };
    if obs_idx.is_empty() {
        return Err(GdmError::Data("no observation columns".into()));
    }
    let class_index: Option<HashMap<&str, usize>> = schema
        .classes
        .as_ref()
        .map(|cs| cs.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect());

    let mut rows: Vec<(f64, Vec<f64>, Option<usize>)> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row_no = r + 1;
        let rec = rec.map_err(|e| GdmError::Data(format!("row {row_no}: {e}")))?;
        if rec.len() != header.len() {
            return Err(GdmError::Data(format!(
                "row {row_no}: {} fields, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            let cell = rec[i].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| GdmError::Data(format!("row {row_no}, column '{}': '{cell}' is not a number", header[i])))
        };
        let time = match time_idx {
            Some(i) => num(i)?,
            None => r as f64,
        };
        let values = obs_idx.iter().map(|&i| num(i)).collect::<Result<Vec<_>>>()?;
        let label = match label_idx {
            None => None,
            Some(i) => {
                let cell = rec[i].trim();
                let parsed = match &class_index {
                    Some(map) => map.get(cell).copied(),
                    None => cell.parse::<usize>().ok(),
                };
                Some(parsed.ok_or_else(|| GdmError::Data(format!("row {row_no}: unknown label '{cell}'")))?)
            }
        };
        rows.push((time, values, label));
    }
    if rows.is_empty() {
        return Err(GdmError::Data("file has no data rows".into()));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = obs_idx.len();
    let y = Matrix::from_fn(rows.len(), n, |t, j| rows[t].1[j]);
    let labels = label_idx.map(|_| rows.iter().map(|r| r.2.expect("label parsed")).collect());
    ObsSeries::new(y, labels)
}

pub fn load_series_csv(path: &Path, schema: &CsvSchema) -> Result<ObsSeries> {
    let f = File::open(path).map_err(|e| GdmError::Io(format!("{}: {e}", path.display())))?;
    read_series_csv(std::io::BufReader::new(f), schema).map_err(|e| match e {
        GdmError::Data(m) => GdmError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Per-coordinate centring and scaling, fitted on training series.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(series: &[ObsSeries]) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| GdmError::InvalidArgument("nothing to fit the standardizer on".into()))?;
        let n = first.dim();
        if series.iter().any(|s| s.dim() != n) {
            return Err(GdmError::Data("series differ in dimension".into()));
        }
        let total: usize = series.iter().map(ObsSeries::len).sum();
        if total == 0 {
            return Err(GdmError::Data("no rows to fit the standardizer on".into()));
        }
        let mut mean = vec![0.0; n];
        for s in series {
            for t in 0..s.len() {
                for (m, v) in mean.iter_mut().zip(s.y.row(t)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= total as f64);
        let mut var = vec![0.0; n];
        for s in series {
            for t in 0..s.len() {
                for j in 0..n {
                    var[j] += (s.y[(t, j)] - mean[j]).powi(2);
                }
            }
        }
        // Constant columns are only centred.
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / total as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, series: &ObsSeries) -> Result<ObsSeries> {
        if series.dim() != self.mean.len() {
            return Err(GdmError::Dimension(format!(
                "series has dimension {}, standardizer {}",
                series.dim(),
                self.mean.len()
            )));
        }
        let y = Matrix::from_fn(series.len(), series.dim(), |t, j| {
            (series.y[(t, j)] - self.mean[j]) / self.scale[j]
        });
        ObsSeries::new(y, series.labels.clone())
    }
}
