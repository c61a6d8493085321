//! Registration quality metrics: label Dice, log-Jacobian spread and folding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Resolution};
use crate::volume::GridGeometry;

/// Integer segmentation; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: GridGeometry,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(geometry: GridGeometry, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "label data has {} values, expected {}",
                labels.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, labels })
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize, usize) -> u32) -> Self {
        let labels = (0..geometry.len())
            .map(|v| {
                let [i, j, k] = geometry.coords(v);
                f(i, j, k)
            })
            .collect();
        Self { geometry, labels }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.labels[self.geometry.index(i, j, k)]
    }

    /// Non-background labels present, ascending.
    pub fn inventory(&self) -> Vec<u32> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Per-pair evaluation; serialises to exactly these five JSON fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub dice_per_label: BTreeMap<u32, f64>,
    pub dice_mean: f64,
    pub sdlogj: f64,
    pub folding_pct: f64,
    pub evaluated_label_count: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceScores {
    pub per_label: BTreeMap<u32, f64>,
    /// Mean over evaluated labels; 1.0 when neither volume has any label.
    pub mean: f64,
}

/// Dice per non-background label present in either volume.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceScores> {
    if a.geometry.dims() != b.geometry.dims() {
        return Err(Error::GeometryMismatch(format!(
            "label volumes {:?} vs {:?}",
            a.geometry.dims(),
            b.geometry.dims()
        )));
    }
    // label -> (|A|, |B|, |A n B|)
    let mut counts: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        if la != 0 {
            counts.entry(la).or_default().0 += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default().1 += 1;
        }
        if la != 0 && la == lb {
            counts.entry(la).or_default().2 += 1;
        }
    }
    let per_label: BTreeMap<u32, f64> = counts
        .into_iter()
        .map(|(l, (na, nb, both))| (l, 2.0 * both as f64 / (na + nb) as f64))
        .collect();
    let mean = if per_label.is_empty() {
        1.0
    } else {
        per_label.values().sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceScores { per_label, mean })
}

/// Nearest-neighbour pullback of labels through a full-resolution field.
pub fn warp_labels(seg: &LabelVolume, u: &DisplacementField) -> Result<LabelVolume> {
    if u.resolution() != Resolution::Full || u.geometry().dims() != seg.geometry.dims() {
        return Err(Error::GeometryMismatch(format!(
            "labels {:?} need a full-resolution field on the same grid, got {:?} ({:?})",
            seg.geometry.dims(),
            u.geometry().dims(),
            u.resolution()
        )));
    }
    let g = seg.geometry;
    let dims = g.dims();
    let labels = (0..g.len())
        .map(|v| {
            let p = g.coords(v);
            let d = u.vector(v);
            let q = [0, 1, 2].map(|a| {
                let x = (p[a] as f64 + d[a] as f64).clamp(0.0, (dims[a] - 1) as f64);
                x.round() as usize
            });
            seg.labels[g.index(q[0], q[1], q[2])]
        })
        .collect();
    Ok(LabelVolume {
        geometry: g,
        labels,
    })
}

pub const LOG_JACOBIAN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianStats {
    pub sdlogj: f64,
    pub folding_pct: f64,
    pub mean_det: f64,
    pub min_det: f64,
    pub max_det: f64,
}

/// Determinant of `I + grad u` at every interior voxel (central differences).
pub fn jacobian_determinants(u: &DisplacementField) -> Result<Vec<f64>> {
    if u.resolution() != Resolution::Full {
        return Err(Error::Config(
            "Jacobian statistics need a full-resolution field".into(),
        ));
    }
    let g = *u.geometry();
    let [nx, ny, nz] = g.dims();
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::Geometry(format!(
            "Jacobian needs at least 3 voxels per axis, got {:?}",
            g.dims()
        )));
    }
    let comps = [u.component(0), u.component(1), u.component(2)];
    let strides = [1, nx, nx * ny];
    let mut dets = Vec::with_capacity((nx - 2) * (ny - 2) * (nz - 2));
    for k in 1..nz - 1 {
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let v = g.index(i, j, k);
                // m[r][c] = d(x_r + u_r)/d x_c
                let mut m = [[0f64; 3]; 3];
                for (r, comp) in comps.iter().enumerate() {
                    for (c, &s) in strides.iter().enumerate() {
                        m[r][c] = 0.5 * (comp[v + s] as f64 - comp[v - s] as f64);
                    }
                    m[r][r] += 1.0;
                }
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                dets.push(det);
            }
        }
    }
    Ok(dets)
}

/// Population standard deviation of `log(max(det, 1e-6))` and the
/// percentage of interior voxels with `det <= 0`.
pub fn jacobian_stats(u: &DisplacementField) -> Result<JacobianStats> {
    let dets = jacobian_determinants(u)?;
    let n = dets.len() as f64;
    let folded = dets.iter().filter(|&&d| d <= 0.0).count();
    let logs: Vec<f64> = dets
        .iter()
        .map(|&d| d.max(LOG_JACOBIAN_FLOOR).ln())
        .collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok(JacobianStats {
        sdlogj: var.sqrt(),
        folding_pct: 100.0 * folded as f64 / n,
        mean_det: dets.iter().sum::<f64>() / n,
        min_det: dets.iter().copied().fold(f64::INFINITY, f64::min),
        max_det: dets.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Dice of `warp_labels(moving_seg, u)` against `fixed_seg`, plus Jacobian statistics.
pub fn evaluate(
    u: &DisplacementField,
    fixed_seg: &LabelVolume,
    moving_seg: &LabelVolume,
) -> Result<MetricsReport> {
    let warped = warp_labels(moving_seg, u)?;
    let scores = dice(&warped, fixed_seg)?;
    let jac = jacobian_stats(u)?;
    Ok(MetricsReport {
        evaluated_label_count: scores.per_label.len(),
        dice_per_label: scores.per_label,
        dice_mean: scores.mean,
        sdlogj: jac.sdlogj,
        folding_pct: jac.folding_pct,
    })
}
