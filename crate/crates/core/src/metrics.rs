//! Per-epoch training records and their CSV/JSON forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: [&str; 11] = [
    "epoch",
    "lr",
    "loss_ce",
    "loss_s",
    "reg_k",
    "reg_r",
    "akc_selected",
    "arc_selected_labeled",
    "arc_selected_unlabeled",
    "train_acc",
    "test_acc",
];

/// One row per epoch. Loss columns are unweighted epoch means; epoch 0 is
/// the state right after head initialization, before any gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_s: f64,
    pub reg_k: f64,
    pub reg_r: f64,
    pub akc_selected: f64,
    pub arc_selected_labeled: f64,
    pub arc_selected_unlabeled: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    record: T,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.last().map(|r| r.test_acc)
    }

    /// Highest test accuracy and its epoch; the earliest epoch wins ties.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.records.iter().fold(None, |best, r| match best {
            Some((_, acc)) if acc >= r.test_acc => best,
            _ => Some((r.epoch, r.test_acc)),
        })
    }

    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
        if header != METRICS_HEADER {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: format!("unexpected metrics header {header:?}"),
            });
        }
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(csv_err)?;
        Ok(Self { records })
    }

    pub fn to_json_string(&self) -> Result<String> {
        let rows: Vec<Versioned<&EpochRecord>> = self
            .records
            .iter()
            .map(|r| Versioned {
                schema_version: METRICS_SCHEMA_VERSION,
                record: r,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let rows: Vec<Versioned<EpochRecord>> = serde_json::from_str(text)?;
        if let Some(v) = rows.iter().find(|v| v.schema_version != METRICS_SCHEMA_VERSION) {
            return Err(Error::InvalidInput(format!("unsupported metrics schema {}", v.schema_version)));
        }
        Ok(Self {
            records: rows.into_iter().map(|v| v.record).collect(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    let (line, column) = e
        .position()
        .map(|p| (p.line(), 0))
        .unwrap_or((0, 0));
    Error::Parse {
        line,
        column,
        message: e.to_string(),
    }
}

/// Mean and sample standard deviation; std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
