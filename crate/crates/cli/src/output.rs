use std::path::Path;

use adacons::config::CONFIG_SCHEMA_VERSION;
use adacons::{Bandwidth, ExperimentConfig, RunOutput, RunSummary, SyntheticTaskSpec, METRICS_SCHEMA_VERSION};
use serde::Serialize;

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct RunRecord<'a> {
    schema_version: u32,
    config_schema_version: u32,
    metrics_schema_version: u32,
    version: &'static str,
    summary: &'a RunSummary,
    mmd_estimator: &'static str,
    bandwidth: String,
    akc_divergence: String,
    /// Absent when the data came from CSV files.
    task: Option<&'a SyntheticTaskSpec>,
    /// Original CSV label of each contiguous target class index.
    target_label_map: Option<&'a [i64]>,
}

/// Writes config.json, metrics.csv, metrics.json, run.json, source.ckpt and
/// target.ckpt into `dir`.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &RunOutput,
    label_map: Option<&[i64]>,
) -> adacons::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json_pretty())?;
    out.log.write_csv(&dir.join("metrics.csv"))?;
    out.log.write_json(&dir.join("metrics.json"))?;
    let bandwidth = match cfg.arc.bandwidth() {
        Bandwidth::Median => "median pairwise distance times {0.5, 1, 2}".to_owned(),
        Bandwidth::Fixed(s) => format!("fixed {s:?}"),
    };
    let record = RunRecord {
        schema_version: RUN_SCHEMA_VERSION,
        config_schema_version: CONFIG_SCHEMA_VERSION,
        metrics_schema_version: METRICS_SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        summary: &out.summary,
        mmd_estimator: "biased V-statistic, summed over bandwidths",
        bandwidth,
        akc_divergence: format!("{:?}", cfg.akc.mode).to_lowercase(),
        task: cfg.csv.is_none().then_some(&cfg.task),
        target_label_map: label_map,
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    out.pair.source().save_checkpoint(&dir.join("source.ckpt"))?;
    out.pair.target.save_checkpoint(&dir.join("target.ckpt"))?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> adacons::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| adacons::Error::InvalidInput(e.to_string()))?;
    let csv_err = |e: csv::Error| adacons::Error::InvalidInput(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
