//! `eval-pairs`: register and score every pair in a manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use voxreg_core::io::{self, fvl1, nifti};
use voxreg_core::metrics::evaluate;
use voxreg_core::{register, DisplacementField, FeatureSource, RegistrationConfig, Resolution};

use crate::{write_json, CliError, CliResult, EvalArgs};

#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub fixed_seg: PathBuf,
    pub moving_seg: PathBuf,
    pub features: Option<(PathBuf, PathBuf)>,
}

/// One pair per line, tab-separated; blank lines and `#` comments skipped.
pub fn parse_manifest(text: &str, base: &Path) -> CliResult<Vec<PairEntry>> {
    let resolve = |s: &str| {
        let p = PathBuf::from(s.trim());
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 && cols.len() != 6 {
            return Err(CliError::Usage(format!(
                "manifest line {}: expected 4 or 6 tab-separated columns, found {}",
                n + 1,
                cols.len()
            )));
        }
        pairs.push(PairEntry {
            fixed: resolve(cols[0]),
            moving: resolve(cols[1]),
            fixed_seg: resolve(cols[2]),
            moving_seg: resolve(cols[3]),
            features: (cols.len() == 6).then(|| (resolve(cols[4]), resolve(cols[5]))),
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Usage("manifest lists no pairs".into()));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairSummary {
    pub index: usize,
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub initial_dice_mean: f64,
    pub dice_mean: f64,
    pub sdlogj: f64,
    pub folding_pct: f64,
    pub runtime_ms: f64,
    /// Directory holding `disp.fvl1` and `report.json`.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over pairs.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub pairs: Vec<PairSummary>,
    pub initial_dice_mean: MeanStd,
    pub dice_mean: MeanStd,
    pub sdlogj: MeanStd,
    pub folding_pct: MeanStd,
    pub runtime_ms: MeanStd,
    pub config: RegistrationConfig,
}

fn run_pair(
    index: usize,
    entry: &PairEntry,
    cfg: &RegistrationConfig,
    out_dir: &Path,
) -> CliResult<PairSummary> {
    let start = Instant::now();
    let fixed = nifti::read_volume(&entry.fixed)?;
    let moving = nifti::read_volume(&entry.moving)?;
    let fixed_seg = nifti::read_labels(&entry.fixed_seg)?;
    let moving_seg = nifti::read_labels(&entry.moving_seg)?;
    let external = match (cfg.feature_source, &entry.features) {
        (FeatureSource::External, Some((f, m))) => {
            Some((fvl1::ingest_features(f)?, fvl1::ingest_features(m)?))
        }
        (FeatureSource::External, None) => {
            return Err(CliError::Usage(format!(
                "pair {index}: external features need 6 manifest columns"
            )))
        }
        (FeatureSource::Mind, _) => None,
    };
    let res = register(&fixed, &moving, cfg, external.as_ref().map(|(f, m)| (f, m)))?;
    let initial = evaluate(
        &DisplacementField::zeros(*fixed.geometry(), Resolution::Full),
        &fixed_seg,
        &moving_seg,
    )?;
    let report = evaluate(&res.displacement, &fixed_seg, &moving_seg)?;
    let dir = out_dir.join(format!("pair_{index:03}"));
    std::fs::create_dir_all(&dir).map_err(|source| voxreg_core::Error::Io {
        path: dir.clone(),
        source,
    })?;
    fvl1::write_displacement(&res.displacement, &dir.join("disp.fvl1"))?;
    io::write_report(&report, &dir.join("report.json"))?;
    let summary = PairSummary {
        index,
        fixed: entry.fixed.clone(),
        moving: entry.moving.clone(),
        initial_dice_mean: initial.dice_mean,
        dice_mean: report.dice_mean,
        sdlogj: report.sdlogj,
        folding_pct: report.folding_pct,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        output_dir: dir,
    };
    log::info!(
        "pair {index}: dice {:.4} -> {:.4}, sdlogj {:.4}, folding {:.3}%",
        summary.initial_dice_mean,
        summary.dice_mean,
        summary.sdlogj,
        summary.folding_pct
    );
    Ok(summary)
}

pub fn summarize(pairs: Vec<PairSummary>, cfg: &RegistrationConfig) -> EvalSummary {
    let col = |f: fn(&PairSummary) -> f64| MeanStd::of(&pairs.iter().map(f).collect::<Vec<_>>());
    EvalSummary {
        seed: cfg.pca.seed,
        initial_dice_mean: col(|p| p.initial_dice_mean),
        dice_mean: col(|p| p.dice_mean),
        sdlogj: col(|p| p.sdlogj),
        folding_pct: col(|p| p.folding_pct),
        runtime_ms: col(|p| p.runtime_ms),
        pairs,
        config: cfg.clone(),
    }
}

pub fn run(args: &EvalArgs, jobs: Option<usize>) -> CliResult<()> {
    let cfg = args.config.load()?;
    let text =
        std::fs::read_to_string(&args.manifest).map_err(|source| voxreg_core::Error::Io {
            path: args.manifest.clone(),
            source,
        })?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;
    log::info!(
        "{} pairs, {} workers",
        entries.len(),
        jobs.unwrap_or_else(rayon::current_num_threads)
    );
    let results: Vec<CliResult<PairSummary>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| run_pair(i, e, &cfg, &args.out_dir))
        .collect();
    // all pairs finish before the summary is written
    let pairs = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    write_json(&summarize(pairs, &cfg), &args.out_report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_columns_and_paths() {
        let text = "# pairs\na.nii\tb.nii\tas.nii\tbs.nii\n\n/x/c.nii\td.nii\tcs.nii\tds.nii\tcf.fvl1\tdf.fvl1\n";
        let pairs = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].fixed, PathBuf::from("/data/a.nii"));
        assert_eq!(pairs[1].fixed, PathBuf::from("/x/c.nii"));
        assert_eq!(
            pairs[1].features,
            Some((
                PathBuf::from("/data/cf.fvl1"),
                PathBuf::from("/data/df.fvl1")
            ))
        );
        assert!(parse_manifest("a\tb\tc\n", Path::new(".")).is_err());
        assert!(parse_manifest("# nothing\n", Path::new(".")).is_err());
    }

    #[test]
    fn mean_std_population() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
    }
}
