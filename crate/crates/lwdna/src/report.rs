//! Output files: JSON reports, channel tables and output directories.

use std::fs;
use std::path::{Path, PathBuf};

use lwdna_core::ShrinkReport;
use serde::Serialize;

use crate::error::{Error, Result};

/// Schema files shipped with the crate, by output file name.
pub const SCHEMAS: [(&str, &str); 2] = [
    ("shrink_report.json", include_str!("../schemas/shrink_report.schema.json")),
    ("summary.json", include_str!("../schemas/summary.schema.json")),
];

/// Create `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json("serialize", e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

/// `layer_index, wide_channels, kept_channels, percent_of_baseline`
pub fn channels_csv(report: &ShrinkReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer_index", "wide_channels", "kept_channels", "percent_of_baseline"])?;
    for row in &report.groups {
        w.write_record([
            row.index.to_string(),
            row.wide.to_string(),
            row.kept.to_string(),
            format!("{:.2}", row.percent_of_baseline),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {}", e)))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Write `shrink_report.json` and `channels.csv` into `dir`.
pub fn write_shrink_outputs(dir: &Path, report: &ShrinkReport) -> Result<Vec<PathBuf>> {
    let json = dir.join("shrink_report.json");
    let csv = dir.join("channels.csv");
    write_json(&json, report)?;
    write_text(&csv, &channels_csv(report)?)?;
    Ok(vec![json, csv])
}

pub fn read_shrink_report(path: &Path) -> Result<ShrinkReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
