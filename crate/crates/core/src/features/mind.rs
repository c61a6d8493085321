//! MIND self-similarity context (SSC) descriptors.
//!
//! For the six axis neighbours at distance `d`, every pair of neighbours
//! that are edge-adjacent (squared offset distance `2d²`) yields one patch
//! distance: the box-averaged squared difference between the image shifted
//! to each neighbour. That gives 12 channels. The per-voxel variance
//! estimate is the mean of those 12 distances, clamped around its
//! volume-wide mean, and each channel is `exp(-D / V)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FeatureVolume;
use crate::error::{Error, Result};
use crate::filters::box_mean;
use crate::volume::{GridGeometry, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MindConfig {
    pub dilation: usize,
    pub patch_radius: usize,
    /// `(lo, hi)` multipliers of the volume-wide mean variance.
    pub variance_clamp: (f64, f64),
}

impl Default for MindConfig {
    fn default() -> Self {
        Self {
            dilation: 2,
            patch_radius: 1,
            variance_clamp: (0.001, 1000.0),
        }
    }
}

impl MindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation < 1 || self.patch_radius < 1 {
            return Err(Error::Config(
                "mind.dilation and mind.patch_radius must be >= 1".into(),
            ));
        }
        let (lo, hi) = self.variance_clamp;
        if !(lo > 0.0 && lo < 1.0 && hi > 1.0 && hi.is_finite()) {
            return Err(Error::Config(format!(
                "mind.variance_clamp must satisfy 0 < lo < 1 < hi, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

pub const MIND_CHANNELS: usize = 12;

const NEIGHBOURS: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

/// The 12 neighbour pairs at squared distance 2, in a fixed order.
pub fn ssc_pairs() -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(MIND_CHANNELS);
    for a in 0..NEIGHBOURS.len() {
        for b in a + 1..NEIGHBOURS.len() {
            let d2: isize = (0..3)
                .map(|i| (NEIGHBOURS[a][i] - NEIGHBOURS[b][i]).pow(2))
                .sum();
            if d2 == 2 {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// Smallest `V` used in the division; only reached by flat images, where
/// every distance is zero and every channel becomes 1.
const VARIANCE_FLOOR: f64 = 1e-30;

pub fn mind_ssc(vol: &Volume3, cfg: &MindConfig) -> Result<FeatureVolume> {
    cfg.validate()?;
    let geom = *vol.geometry();
    let dims = geom.dims();
    let reach = 2 * (cfg.dilation + cfg.patch_radius);
    if dims.iter().any(|&n| n <= reach) {
        return Err(Error::Config(format!(
            "MIND with dilation {} and radius {} needs more than {reach} voxels per axis, got {dims:?}",
            cfg.dilation, cfg.patch_radius
        )));
    }
    let n = geom.len();
    let d = cfg.dilation as isize;
    let img = vol.data();

    let distances: Vec<Vec<f32>> = ssc_pairs()
        .into_par_iter()
        .map(|(a, b)| {
            let oa = NEIGHBOURS[a].map(|v| v * d);
            let ob = NEIGHBOURS[b].map(|v| v * d);
            let mut sq = vec![0f64; n];
            for (v, out) in sq.iter_mut().enumerate() {
                let p = geom.coords(v);
                let ia = shifted_index(&geom, p, oa);
                let ib = shifted_index(&geom, p, ob);
                let diff = img[ia] as f64 - img[ib] as f64;
                *out = diff * diff;
            }
            box_mean(&mut sq, dims, cfg.patch_radius);
            sq.into_iter().map(|x| x as f32).collect()
        })
        .collect();

    let mut variance = vec![0f64; n];
    for plane in &distances {
        for (acc, &x) in variance.iter_mut().zip(plane) {
            *acc += x as f64;
        }
    }
    for v in variance.iter_mut() {
        *v /= MIND_CHANNELS as f64;
    }
    let mean = variance.iter().sum::<f64>() / n as f64;
    let (lo, hi) = (cfg.variance_clamp.0 * mean, cfg.variance_clamp.1 * mean);
    for v in variance.iter_mut() {
        *v = v.clamp(lo, hi).max(VARIANCE_FLOOR);
    }

    let planes: Vec<Vec<f32>> = distances
        .into_par_iter()
        .map(|plane| {
            plane
                .iter()
                .zip(&variance)
                .map(|(&dist, &var)| ((-(dist as f64) / var).exp() as f32).max(f32::MIN_POSITIVE))
                .collect()
        })
        .collect();
    FeatureVolume::from_planes(geom, 1, planes)
}

#[inline]
fn shifted_index(geom: &GridGeometry, p: [usize; 3], off: [isize; 3]) -> usize {
    let dims = geom.dims();
    let c = |axis: usize| (p[axis] as isize + off[axis]).clamp(0, dims[axis] as isize - 1) as usize;
    geom.index(c(0), c(1), c(2))
}
