//! Coupled convex stage: discrete displacement search on a control grid.
//!
//! A cost volume holds, for every control point, the patch-SSD between
//! fixed features and moving features displaced by each candidate on an
//! integer lattice. The coupled iterations alternate a per-point argmin of
//! `cost + theta * |delta - v|^2` against the current smoothed field `v`
//! with a box smoothing of the selection, for an increasing `theta`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::field::{control_geometry, DisplacementField, Resolution};
use crate::filters::box_mean;
use crate::volume::GridGeometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexConfig {
    pub grid_stride: usize,
    pub search_radius: usize,
    pub search_step: usize,
    pub theta_schedule: Vec<f64>,
    pub smooth_radius: usize,
    /// Half-width of the SSD aggregation patch around each control point.
    pub patch_radius: usize,
    /// Unit-normalise feature vectors before building costs.
    pub normalize_features: bool,
}

impl Default for ConvexConfig {
    fn default() -> Self {
        Self {
            grid_stride: 2,
            search_radius: 8,
            search_step: 1,
            theta_schedule: vec![1.0, 3.0, 10.0],
            smooth_radius: 1,
            patch_radius: 1,
            normalize_features: false,
        }
    }
}

impl ConvexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_stride == 0 || self.search_step == 0 {
            return Err(Error::Config(
                "convex.grid_stride and convex.search_step must be >= 1".into(),
            ));
        }
        if !(2 * self.search_radius).is_multiple_of(self.search_step) {
            return Err(Error::Config(format!(
                "convex.search_step {} must divide 2 * search_radius = {}",
                self.search_step,
                2 * self.search_radius
            )));
        }
        if self.theta_schedule.is_empty() {
            return Err(Error::Config(
                "convex.theta_schedule needs at least one weight".into(),
            ));
        }
        if self
            .theta_schedule
            .iter()
            .any(|t| !(t.is_finite() && *t > 0.0))
        {
            return Err(Error::Config(
                "convex.theta_schedule weights must be positive".into(),
            ));
        }
        if self.theta_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "convex.theta_schedule must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Candidate displacements ordered by squared length, then by z, y, x.
    ///
    /// Index 0 is always the zero displacement, so the smallest-index
    /// tie-break prefers shorter moves.
    pub fn candidates(&self) -> Vec<[i32; 3]> {
        let r = self.search_radius as i32;
        let q = self.search_step as i32;
        let axis: Vec<i32> = (0..=2 * r / q).map(|i| -r + i * q).collect();
        let mut out = Vec::with_capacity(axis.len().pow(3));
        for &z in &axis {
            for &y in &axis {
                for &x in &axis {
                    out.push([x, y, z]);
                }
            }
        }
        out.sort_by_key(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], d[2], d[1], d[0]));
        out
    }
}

/// Normalised matching costs, `K` per control point.
#[derive(Debug, Clone)]
pub struct CostVolume {
    image: GridGeometry,
    control: GridGeometry,
    stride: usize,
    candidates: Vec<[i32; 3]>,
    costs: Vec<f32>,
}

impl CostVolume {
    /// Assembles a cost volume from raw per-point costs and normalises it.
    pub fn from_raw(
        image: GridGeometry,
        stride: usize,
        candidates: Vec<[i32; 3]>,
        mut costs: Vec<f32>,
    ) -> Result<Self> {
        let control = control_geometry(&image, stride)?;
        let k = candidates.len();
        if k == 0 || costs.len() != control.len() * k {
            return Err(Error::Geometry(format!(
                "{} costs for {} control points x {k} candidates",
                costs.len(),
                control.len()
            )));
        }
        if costs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::NonFinite(
                "costs must be finite and non-negative".into(),
            ));
        }
        costs.par_chunks_mut(k).for_each(normalize_row);
        Ok(Self {
            image,
            control,
            stride,
            candidates,
            costs,
        })
    }

    pub fn image_geometry(&self) -> &GridGeometry {
        &self.image
    }

    pub fn control_geometry(&self) -> &GridGeometry {
        &self.control
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn candidates(&self) -> &[[i32; 3]] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn costs(&self, point: usize) -> &[f32] {
        let k = self.candidates.len();
        &self.costs[point * k..(point + 1) * k]
    }

    /// Unregularised argmin per control point.
    pub fn argmin(&self) -> Vec<usize> {
        self.costs
            .par_chunks(self.candidates.len())
            .map(|row| {
                let mut best = 0;
                for (i, &c) in row.iter().enumerate() {
                    if c < row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

fn normalize_row(row: &mut [f32]) {
    let mean = row.iter().map(|&c| c as f64).sum::<f64>() / row.len() as f64;
    if mean > 0.0 {
        let inv = 1.0 / mean;
        row.iter_mut().for_each(|c| *c = (*c as f64 * inv) as f32);
    }
}

/// Patch SSD between fixed features around each control point and moving
/// features displaced by every candidate, averaged over patch and channels.
pub fn build_cost_volume(
    fixed: &FeatureVolume,
    moving: &FeatureVolume,
    cfg: &ConvexConfig,
) -> Result<CostVolume> {
    cfg.validate()?;
    if fixed.geometry().dims() != moving.geometry().dims() {
        return Err(Error::GeometryMismatch(format!(
            "fixed features {:?} vs moving features {:?}",
            fixed.geometry().dims(),
            moving.geometry().dims()
        )));
    }
    if fixed.channels() != moving.channels() {
        return Err(Error::ChannelMismatch {
            expected: fixed.channels(),
            found: moving.channels(),
        });
    }
    let (fixed, moving) = if cfg.normalize_features {
        (fixed.l2_normalized(), moving.l2_normalized())
    } else {
        (fixed.clone(), moving.clone())
    };
    let image = *fixed.geometry();
    let dims = image.dims();
    let stride = cfg.grid_stride;
    let control = control_geometry(&image, stride)?;
    let candidates = cfg.candidates();
    let k = candidates.len();
    let c = fixed.channels();
    let fx = fixed.interleaved();
    let mv = moving.interleaved();
    let rp = cfg.patch_radius as i32;
    let patch = (2 * rp + 1) as usize;
    let norm = 1.0 / (patch.pow(3) * c) as f64;
    let clampi = |v: i32, n: usize| v.clamp(0, n as i32 - 1) as usize;

    let mut costs = vec![0f32; control.len() * k];
    costs
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(point, row)| {
            let cp = control.coords(point).map(|v| (v * stride) as i32);
            // fixed patch, channel-contiguous
            let mut fpatch = Vec::with_capacity(patch.pow(3) * c);
            for oz in -rp..=rp {
                for oy in -rp..=rp {
                    for ox in -rp..=rp {
                        let v = image.index(
                            clampi(cp[0] + ox, dims[0]),
                            clampi(cp[1] + oy, dims[1]),
                            clampi(cp[2] + oz, dims[2]),
                        );
                        fpatch.extend_from_slice(&fx[v * c..(v + 1) * c]);
                    }
                }
            }
            for (slot, d) in row.iter_mut().zip(&candidates) {
                let mut acc = 0f64;
                let mut f = fpatch.chunks_exact(c);
                for oz in -rp..=rp {
                    let z = clampi(cp[2] + oz + d[2], dims[2]);
                    for oy in -rp..=rp {
                        let y = clampi(cp[1] + oy + d[1], dims[1]);
                        for ox in -rp..=rp {
                            let x = clampi(cp[0] + ox + d[0], dims[0]);
                            let v = image.index(x, y, z);
                            let m = &mv[v * c..(v + 1) * c];
                            let fv = f.next().expect("patch size");
                            let mut s = 0f32;
                            for (a, b) in fv.iter().zip(m) {
                                let e = a - b;
                                s += e * e;
                            }
                            acc += s as f64;
                        }
                    }
                }
                *slot = (acc * norm) as f32;
            }
        });
    CostVolume::from_raw(image, stride, candidates, costs)
}

/// Index of the candidate minimising `cost + theta * |delta - prior|^2`;
/// ties go to the smallest index.
pub fn select_candidate(
    costs: &[f32],
    candidates: &[[i32; 3]],
    prior: [f64; 3],
    theta: f64,
) -> usize {
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (i, (&c, d)) in costs.iter().zip(candidates).enumerate() {
        let dx = d[0] as f64 - prior[0];
        let dy = d[1] as f64 - prior[1];
        let dz = d[2] as f64 - prior[2];
        let val = c as f64 + theta * (dx * dx + dy * dy + dz * dz);
        if val < best_val {
            best_val = val;
            best = i;
        }
    }
    best
}

/// One coupled selection over all control points against `prior`
/// (three component planes on the control grid).
pub fn coupled_select(cost: &CostVolume, prior: &[Vec<f64>; 3], theta: f64) -> Vec<usize> {
    let k = cost.len();
    cost.costs
        .par_chunks(k)
        .enumerate()
        .map(|(p, row)| {
            select_candidate(
                row,
                &cost.candidates,
                [prior[0][p], prior[1][p], prior[2][p]],
                theta,
            )
        })
        .collect()
}

fn selection_planes(cost: &CostVolume, picks: &[usize]) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|axis| {
        picks
            .iter()
            .map(|&i| cost.candidates[i][axis] as f64)
            .collect()
    })
}

/// Runs the coupled iterations and returns the control-resolution field.
pub fn coupled_convex(cost: &CostVolume, cfg: &ConvexConfig) -> Result<DisplacementField> {
    cfg.validate()?;
    let dims = cost.control.dims();
    let mut field = selection_planes(cost, &cost.argmin());
    for &theta in &cfg.theta_schedule {
        let picks = coupled_select(cost, &field, theta);
        field = selection_planes(cost, &picks);
        for plane in field.iter_mut() {
            box_mean(plane, dims, cfg.smooth_radius);
        }
    }
    let data = field
        .iter()
        .flat_map(|p| p.iter().map(|&v| v as f32))
        .collect();
    DisplacementField::new(
        cost.control,
        Resolution::Control {
            stride: cost.stride,
        },
        data,
    )
}
