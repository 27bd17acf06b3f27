//! Measurement traces and their CSV representation.
//!
//! On disk a trace is CSV with a header row and columns `t,value[,value...]`:
//! one row per step, first column the time index, remaining columns the
//! measurement vector. Ground truth never appears in files; synthetic
//! generators attach it in memory for evaluation only.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A time-indexed sequence of measurement vectors, optionally paired with the
/// generating ground-truth states (synthetic data only).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub t: Vec<f64>,
    pub z: Vec<DVector<f64>>,
    pub truth: Option<Vec<DVector<f64>>>,
}

impl Trace {
    pub fn new(t: Vec<f64>, z: Vec<DVector<f64>>) -> Result<Self> {
        if t.len() != z.len() {
            return Err(Error::Dimension(format!(
                "time axis length {} does not match {} measurements",
                t.len(),
                z.len()
            )));
        }
        if let Some(first) = z.first() {
            if z.iter().any(|v| v.len() != first.len()) {
                return Err(Error::Dimension(
                    "measurements must share one dimension".into(),
                ));
            }
        }
        Ok(Self { t, z, truth: None })
    }

    /// Scalar trace with implicit unit time steps.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            t: (0..values.len()).map(|i| i as f64).collect(),
            z: values.iter().map(|v| DVector::from_element(1, *v)).collect(),
            truth: None,
        }
    }

    /// Attaches ground-truth states (same length as the measurements).
    pub fn with_truth(mut self, truth: Vec<DVector<f64>>) -> Result<Self> {
        if truth.len() != self.z.len() {
            return Err(Error::Dimension(format!(
                "truth length {} does not match {} measurements",
                truth.len(),
                self.z.len()
            )));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Measurement dimension; `None` for an empty trace.
    pub fn dim(&self) -> Option<usize> {
        self.z.first().map(|v| v.len())
    }

    /// Borrowed sub-trace over `range` (truth sliced alongside).
    pub fn slice(&self, start: usize, end: usize) -> Result<Trace> {
        if start > end || end > self.len() {
            return Err(Error::Config(format!(
                "slice {start}..{end} out of bounds for trace of length {}",
                self.len()
            )));
        }
        Ok(Trace {
            t: self.t[start..end].to_vec(),
            z: self.z[start..end].to_vec(),
            truth: self.truth.as_ref().map(|tr| tr[start..end].to_vec()),
        })
    }

    /// Reads `t,value[,value...]` CSV with a header row.
    pub fn read_csv(path: &Path) -> Result<Trace> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
        let mut t = Vec::new();
        let mut z = Vec::new();
        let mut dim = None;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() < 2 {
                return Err(Error::Io(format!(
                    "{}: row {} has {} columns, need t plus at least one value",
                    path.display(),
                    line + 2,
                    record.len()
                )));
            }
            let parse = |field: &str| -> Result<f64> {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::Io(format!(
                        "{}: row {}: cannot parse '{field}' as a number",
                        path.display(),
                        line + 2
                    ))
                })
            };
            t.push(parse(&record[0])?);
            let values: Vec<f64> = record
                .iter()
                .skip(1)
                .map(parse)
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Io(format!(
                        "{}: row {} has {} values, expected {d}",
                        path.display(),
                        line + 2,
                        values.len()
                    )));
                }
                _ => {}
            }
            z.push(DVector::from_vec(values));
        }
        if z.is_empty() {
            return Err(Error::Empty(format!(
                "{}: trace has no data rows",
                path.display()
            )));
        }
        Trace::new(t, z)
    }

    /// Writes `t,value[,value...]` CSV with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
        let dim = self.dim().unwrap_or(1);
        let mut header = vec!["t".to_string()];
        header.extend(std::iter::repeat_n("value".to_string(), dim));
        writer.write_record(&header)?;
        for (t, z) in self.t.iter().zip(&self.z) {
            let mut row = vec![format!("{t}")];
            row.extend(z.iter().map(|v| format!("{v}")));
            writer.write_record(&row)?;
        }
        writer.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }
}
