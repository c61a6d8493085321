//! File formats: NIfTI-1 volumes and labels, FVL1 features and fields, JSON.

pub mod fvl1;
pub mod nifti;

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::PcaBasis;
use crate::metrics::MetricsReport;

pub use fvl1::{ingest_features, read_displacement, read_fvl1, write_displacement, write_fvl1};
pub use nifti::{read_labels, read_nifti, read_volume, write_labels, write_nifti};

pub fn write_basis(basis: &PcaBasis, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(basis)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_basis(path: &Path) -> Result<PcaBasis> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricsReport::from_json(&text)
}
