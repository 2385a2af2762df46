//! Patient records and the JSON-lines cohort format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// EHR time series, `T × J`, with a parallel observation mask.
///
/// Unobserved entries hold 0.0 and have mask 0.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrInput {
    pub values: Vec<Vec<f64>>,
    #[serde(default)]
    pub mask: Vec<Vec<f64>>,
}

impl EhrInput {
    /// Builds an input from raw values, treating NaN as unobserved.
    pub fn from_raw(values: Vec<Vec<f64>>) -> Self {
        let mut input = Self {
            values,
            mask: Vec::new(),
        };
        input.impute();
        input
    }

    pub fn time_steps(&self) -> usize {
        self.values.len()
    }

    pub fn features(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Fills a missing mask with ones and zeroes every unobserved or NaN value.
    pub fn impute(&mut self) {
        if self.mask.is_empty() {
            self.mask = self.values.iter().map(|r| vec![1.0; r.len()]).collect();
        }
        for (row, mrow) in self.values.iter_mut().zip(&mut self.mask) {
            for (v, m) in row.iter_mut().zip(mrow.iter_mut()) {
                if !v.is_finite() || *m == 0.0 {
                    *v = 0.0;
                    *m = 0.0;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.features();
        if self.values.is_empty() || j == 0 {
            return Err(Error::InvalidArgument("EHR series needs T >= 1 and J >= 1".into()));
        }
        if self.values.iter().any(|r| r.len() != j) {
            return Err(Error::InvalidArgument("ragged EHR value rows".into()));
        }
        if self.mask.len() != self.values.len() || self.mask.iter().any(|r| r.len() != j) {
            return Err(Error::InvalidArgument("EHR mask shape differs from values".into()));
        }
        if self.values.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("EHR values contain NaN".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CxrInput {
    pub features: Vec<f64>,
    pub time_hours: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub ehr: EhrInput,
    #[serde(default)]
    pub cxrs: Vec<CxrInput>,
    pub labels: Vec<u8>,
}

impl PatientRecord {
    pub fn has_cxr(&self) -> bool {
        !self.cxrs.is_empty()
    }

    pub fn validate(&self, window_hours: f64) -> Result<()> {
        self.ehr.validate()?;
        if self.labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidArgument(format!(
                "patient {}: labels must be 0 or 1",
                self.patient_id
            )));
        }
        for c in &self.cxrs {
            if !(0.0..=window_hours).contains(&c.time_hours) {
                return Err(Error::InvalidArgument(format!(
                    "patient {}: CXR time {} outside [0, {window_hours}]",
                    self.patient_id, c.time_hours
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct LineOut<'a> {
    format_version: u32,
    #[serde(flatten)]
    record: &'a PatientRecord,
}

const KNOWN_FIELDS: [&str; 5] = ["format_version", "patient_id", "ehr", "cxrs", "labels"];

pub fn save_cohort(records: &[PatientRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(
            &mut out,
            &LineOut {
                format_version: FORMAT_VERSION,
                record,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines cohort. Blank lines are skipped; unknown fields are
/// logged and ignored.
pub fn load_cohort(path: &Path) -> Result<Vec<PatientRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let Some(obj) = value.as_object() else {
            return Err(parse_err("expected a JSON object".into()));
        };
        for key in obj.keys().filter(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
            log::warn!("{}:{}: ignoring unknown field {key:?}", path.display(), i + 1);
        }
        if let Some(v) = obj.get("format_version").and_then(|v| v.as_u64()) {
            if v as u32 != FORMAT_VERSION {
                return Err(parse_err(format!("unsupported format_version {v}")));
            }
        }
        let mut record: PatientRecord =
            serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        record.ehr.impute();
        record.ehr.validate().map_err(|e| parse_err(e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}
