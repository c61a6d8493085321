//! Synthetic registration problems with known answers.
//!
//! `truth` is the field registration should return: `moving(x + truth(x))`
//! equals `fixed(x)`. In 1D with `truth = +2` everywhere, a feature at
//! fixed voxel 10 appears at moving voxel 12.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Resolution};
use crate::filters::gaussian_blur;
use crate::interp::GradStencil;
use crate::metrics::{jacobian_stats, warp_labels, LabelVolume};
use crate::pipeline::warp_volume;
use crate::volume::{resample, GridGeometry, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Checker { period: usize },
    SmoothNoise { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub coarse_grid: [usize; 3],
    pub smoothing_sigma: f64,
    /// Largest absolute displacement component, in voxels.
    pub magnitude_cap: f64,
    pub texture: Texture,
    /// Number of labelled ellipsoids.
    pub blobs: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coarse_grid: [5, 5, 5],
            smoothing_sigma: 2.0,
            magnitude_cap: 6.0,
            texture: Texture::SmoothNoise { sigma: 1.5 },
            blobs: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude_cap > 0.0) || !self.magnitude_cap.is_finite() {
            return Err(Error::Config("synth.magnitude_cap must be > 0".into()));
        }
        if !(self.smoothing_sigma > 0.0) {
            return Err(Error::Config("synth.smoothing_sigma must be > 0".into()));
        }
        if self.coarse_grid.iter().any(|&n| n < 2) {
            return Err(Error::Config(
                "synth.coarse_grid needs at least 2 points per axis".into(),
            ));
        }
        match self.texture {
            Texture::Checker { period: 0 } => {
                Err(Error::Config("checker period must be >= 1".into()))
            }
            Texture::SmoothNoise { sigma } if !(sigma > 0.0) => {
                Err(Error::Config("texture sigma must be > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

pub const MAX_HALVINGS: usize = 5;

/// Smooth random field rescaled so its largest component equals the cap,
/// halved until folding-free.
pub fn random_smooth_field(geom: &GridGeometry, cfg: &SynthConfig) -> Result<DisplacementField> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = geom.dims();
    let spacing = [0, 1, 2]
        .map(|a| geom.spacing()[a] * (dims[a] - 1) as f32 / (cfg.coarse_grid[a] - 1) as f32);
    let coarse = GridGeometry::new(cfg.coarse_grid, spacing)?;
    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let noise: Vec<f32> = (0..coarse.len())
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let fine = resample(&Volume3::new(coarse, noise)?, geom);
        let mut plane: Vec<f64> = fine.data().iter().map(|&v| v as f64).collect();
        gaussian_blur(&mut plane, dims, cfg.smoothing_sigma);
        planes.push(plane);
    }
    let peak = planes.iter().flatten().fold(0f64, |m, v| m.max(v.abs()));
    let mut scale = if peak > 0.0 {
        cfg.magnitude_cap / peak
    } else {
        0.0
    };
    for attempt in 0..=MAX_HALVINGS {
        let data = planes
            .iter()
            .flatten()
            .map(|&v| (v * scale) as f32)
            .collect();
        let field = DisplacementField::new(*geom, Resolution::Full, data)?;
        let stats = jacobian_stats(&field)?;
        if stats.folding_pct == 0.0 {
            return Ok(field);
        }
        log::debug!(
            "synthetic field folds ({:.3}%), halving (attempt {attempt})",
            stats.folding_pct
        );
        scale *= 0.5;
    }
    Err(Error::FoldingFree {
        attempts: MAX_HALVINGS,
    })
}

/// Inverse of `x -> x + u(x)`: for every grid point `y`, Newton's method on
/// `x + u(x) = y` with the exact trilinear Jacobian, returning `v(y) = x - y`.
pub fn invert_field(u: &DisplacementField, iterations: usize) -> Result<DisplacementField> {
    if u.resolution() != Resolution::Full {
        return Err(Error::GeometryMismatch(
            "inversion needs a full-resolution field".into(),
        ));
    }
    let g = *u.geometry();
    let dims = g.dims();
    let planes = [u.component(0), u.component(1), u.component(2)];
    let v: Vec<[f64; 3]> = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let y = g.coords(idx).map(|c| c as f64);
            let mut x = y;
            for _ in 0..iterations {
                let st = GradStencil::new(dims, x);
                let mut r = Vector3::zeros();
                let mut jac = Matrix3::identity();
                for c in 0..3 {
                    let mut val = 0.0;
                    for n in 0..8 {
                        let w = planes[c][st.idx[n]] as f64;
                        val += st.w[n] * w;
                        for a in 0..3 {
                            jac[(c, a)] += st.dw[a][n] * w;
                        }
                    }
                    r[c] = x[c] + val - y[c];
                }
                if r.amax() < 1e-9 {
                    break;
                }
                let step = jac.lu().solve(&r).unwrap_or(r);
                for c in 0..3 {
                    x[c] -= step[c];
                }
            }
            [0, 1, 2].map(|c| x[c] - y[c])
        })
        .collect();
    let data = (0..3)
        .flat_map(|a| v.iter().map(move |vi| vi[a] as f32))
        .collect();
    DisplacementField::new(g, Resolution::Full, data)
}

fn texture(geom: &GridGeometry, tex: Texture, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dims = geom.dims();
    match tex {
        Texture::Checker { period } => (0..geom.len())
            .map(|v| {
                let p = geom.coords(v);
                ((p[0] / period + p[1] / period + p[2] / period) % 2) as f64
            })
            .collect(),
        Texture::SmoothNoise { sigma } => {
            let mut data: Vec<f64> = (0..geom.len())
                .map(|_| rng.sample(StandardNormal))
                .collect();
            gaussian_blur(&mut data, dims, sigma);
            let (lo, hi) = data
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let span = (hi - lo).max(1e-12);
            data.iter_mut().for_each(|v| *v = (*v - lo) / span);
            data
        }
    }
}

fn blob_labels(geom: &GridGeometry, count: usize, rng: &mut ChaCha8Rng) -> LabelVolume {
    let dims = geom.dims().map(|n| n as f64);
    let blobs: Vec<([f64; 3], [f64; 3])> = (0..count)
        .map(|_| {
            let centre = dims.map(|n| rng.random_range(0.3..0.7) * (n - 1.0));
            let radii = dims.map(|n| rng.random_range(0.12..0.22) * n);
            (centre, radii)
        })
        .collect();
    LabelVolume::from_fn(*geom, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        // later blobs overwrite earlier ones
        let mut label = 0;
        for (l, (c, r)) in blobs.iter().enumerate() {
            let d: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
            if d <= 1.0 {
                label = l as u32 + 1;
            }
        }
        label
    })
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub fixed: Volume3,
    pub moving: Volume3,
    pub truth: DisplacementField,
    pub fixed_seg: LabelVolume,
    pub moving_seg: LabelVolume,
}

pub const INVERSION_ITERATIONS: usize = 20;

/// Textured volume with labelled blobs, and its warp by the inverse of `truth`.
pub fn make_pair(geom: &GridGeometry, cfg: &SynthConfig) -> Result<SynthPair> {
    let truth = random_smooth_field(geom, cfg)?;
    make_pair_with_field(geom, cfg, truth)
}

/// As [`make_pair`] with a caller-supplied ground truth.
pub fn make_pair_with_field(
    geom: &GridGeometry,
    cfg: &SynthConfig,
    truth: DisplacementField,
) -> Result<SynthPair> {
    cfg.validate()?;
    if truth.geometry().dims() != geom.dims() || truth.resolution() != Resolution::Full {
        return Err(Error::GeometryMismatch(
            "truth must be a full-resolution field on the pair grid".into(),
        ));
    }
    // separate stream from the field noise
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7e47_u64);
    let tex = texture(geom, cfg.texture, &mut rng);
    let fixed_seg = blob_labels(geom, cfg.blobs, &mut rng);
    let levels = cfg.blobs.max(1) as f64;
    let data = tex
        .iter()
        .zip(fixed_seg.labels())
        .map(|(&t, &l)| (0.6 * t + 0.4 * l as f64 / levels) as f32)
        .collect();
    let fixed = Volume3::new(*geom, data)?;
    let inverse = invert_field(&truth, INVERSION_ITERATIONS)?;
    let moving = warp_volume(&fixed, &inverse)?;
    let moving_seg = warp_labels(&fixed_seg, &inverse)?;
    Ok(SynthPair {
        fixed,
        moving,
        truth,
        fixed_seg,
        moving_seg,
    })
}

/// Mean Euclidean distance between two full-resolution fields, skipping
/// `margin` voxels at every face.
pub fn endpoint_error(a: &DisplacementField, b: &DisplacementField, margin: usize) -> Result<f64> {
    if a.geometry().dims() != b.geometry().dims() || a.resolution() != b.resolution() {
        return Err(Error::GeometryMismatch(
            "endpoint error needs fields on one grid".into(),
        ));
    }
    let g = a.geometry();
    let dims = g.dims();
    if dims.iter().any(|&n| n <= 2 * margin) {
        return Err(Error::Geometry(format!(
            "margin {margin} leaves no voxels in {dims:?}"
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in margin..dims[2] - margin {
        for j in margin..dims[1] - margin {
            for i in margin..dims[0] - margin {
                let v = g.index(i, j, k);
                let (p, q) = (a.vector(v), b.vector(v));
                let d2: f64 = (0..3).map(|c| (p[c] as f64 - q[c] as f64).powi(2)).sum();
                sum += d2.sqrt();
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}
