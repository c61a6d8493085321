//! Preprocessing, features, PCA, coupled convex search, Adam refinement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::{refine, LossRecord};
use crate::config::{FeatureSource, Preprocessing, RegistrationConfig, StridePolicy};
use crate::convex::{build_cost_volume, coupled_convex};
use crate::error::{Error, Result};
use crate::features::{fit_pca, mind_ssc, project, FeatureVolume};
use crate::field::{DisplacementField, Resolution};
use crate::volume::{preprocess_ct, preprocess_mri, GridGeometry, Volume3};

/// Pullback warp: `output(x) = vol(x + u(x))`, trilinear and edge-clamped.
pub fn warp_volume(vol: &Volume3, u: &DisplacementField) -> Result<Volume3> {
    if u.resolution() != Resolution::Full || u.geometry().dims() != vol.geometry().dims() {
        return Err(Error::GeometryMismatch(format!(
            "volume {:?} needs a full-resolution field on the same grid, got {:?} ({:?})",
            vol.geometry().dims(),
            u.geometry().dims(),
            u.resolution()
        )));
    }
    let g = *vol.geometry();
    let (ux, uy, uz) = (u.component(0), u.component(1), u.component(2));
    let data = (0..g.len())
        .map(|v| {
            let p = g.coords(v);
            vol.sample([
                p[0] as f64 + ux[v] as f64,
                p[1] as f64 + uy[v] as f64,
                p[2] as f64 + uz[v] as f64,
            ])
        })
        .collect();
    Volume3::new(g, data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub features_ms: f64,
    pub pca_ms: f64,
    pub convex_ms: f64,
    pub adam_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Full-resolution field on the fixed grid, in image voxels.
    pub displacement: DisplacementField,
    pub warped_moving: Volume3,
    /// Control-resolution output of the convex stage, in the units of the
    /// grid it was computed on.
    pub convex_field: DisplacementField,
    pub loss_trace: Vec<LossRecord>,
    pub timings: StageTimings,
    pub config: RegistrationConfig,
    /// Whether PCA ran (false when disabled or when channels <= k).
    pub pca_applied: bool,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn preprocess(vol: &Volume3, mode: Preprocessing) -> Volume3 {
    match mode {
        Preprocessing::Mri => preprocess_mri(vol).volume,
        Preprocessing::Ct => preprocess_ct(vol).volume,
        Preprocessing::None => vol.clone(),
    }
}

/// Token-grid field in token units to an image-voxel field.
fn token_field_to_voxels(
    u: &DisplacementField,
    stride: usize,
    image: &GridGeometry,
) -> Result<DisplacementField> {
    let s = stride as f64;
    let map = |x: usize| (x as f64 + 0.5) / s - 0.5;
    DisplacementField::from_fn(*image, |i, j, k| {
        u.sample([map(i), map(j), map(k)]).map(|d| (d * s) as f32)
    })
}

/// Registers `moving` onto `fixed`. `external` supplies (fixed, moving)
/// features when `cfg.feature_source` is external.
pub fn register(
    fixed: &Volume3,
    moving: &Volume3,
    cfg: &RegistrationConfig,
    external: Option<(&FeatureVolume, &FeatureVolume)>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let start = Instant::now();
    let image = *fixed.geometry();
    if !image.same_shape(moving.geometry()) {
        return Err(Error::GeometryMismatch(format!(
            "fixed {:?} {:?} vs moving {:?} {:?}; resample first",
            image.dims(),
            image.spacing(),
            moving.geometry().dims(),
            moving.geometry().spacing()
        )));
    }
    let mut timings = StageTimings::default();

    let (mut ff, mut mf) = match cfg.feature_source {
        FeatureSource::Mind => {
            let t = Instant::now();
            let f = preprocess(fixed, cfg.preprocessing);
            let m = preprocess(moving, cfg.preprocessing);
            timings.preprocess_ms = elapsed_ms(t);
            let t = Instant::now();
            let out = (mind_ssc(&f, &cfg.mind)?, mind_ssc(&m, &cfg.mind)?);
            timings.features_ms = elapsed_ms(t);
            out
        }
        FeatureSource::External => {
            let (f, m) = external
                .ok_or_else(|| Error::Missing("external features for fixed and moving".into()))?;
            if f.channels() != m.channels() {
                return Err(Error::ChannelMismatch {
                    expected: f.channels(),
                    found: m.channels(),
                });
            }
            if f.stride() != m.stride() || f.geometry().dims() != m.geometry().dims() {
                return Err(Error::GeometryMismatch(format!(
                    "fixed features {:?}/stride {} vs moving {:?}/stride {}",
                    f.geometry().dims(),
                    f.stride(),
                    m.geometry().dims(),
                    m.stride()
                )));
            }
            let t = Instant::now();
            let out = match cfg.feature_stride_policy {
                StridePolicy::UpsampleToVoxel => {
                    (f.upsample_to_voxels(&image)?, m.upsample_to_voxels(&image)?)
                }
                StridePolicy::Native if f.stride() == 1 => {
                    (f.upsample_to_voxels(&image)?, m.upsample_to_voxels(&image)?)
                }
                StridePolicy::Native => (f.clone(), m.clone()),
            };
            timings.features_ms = elapsed_ms(t);
            out
        }
    };
    let token_stride = ff.stride();

    let t = Instant::now();
    let pca_applied = cfg.pca.enabled && ff.channels() > cfg.pca.components;
    if pca_applied {
        let basis = fit_pca(&ff, &mf, &cfg.pca)?;
        ff = project(&ff, &basis)?;
        mf = project(&mf, &basis)?;
    } else if cfg.pca.enabled {
        log::info!(
            "skipping PCA: {} channels <= {} components",
            ff.channels(),
            cfg.pca.components
        );
    }
    timings.pca_ms = elapsed_ms(t);

    let t = Instant::now();
    let cost = build_cost_volume(&ff, &mf, &cfg.convex)?;
    let convex_field = coupled_convex(&cost, &cfg.convex)?;
    drop(cost);
    timings.convex_ms = elapsed_ms(t);

    let t = Instant::now();
    let refined = refine(&ff, &mf, &convex_field, &cfg.adam)?;
    timings.adam_ms = elapsed_ms(t);

    let displacement = if token_stride > 1 {
        token_field_to_voxels(&refined.field, token_stride, &image)?
    } else {
        refined.field
    };
    let warped_moving = warp_volume(moving, &displacement)?;
    timings.total_ms = elapsed_ms(start);
    log::info!(
        "registered {:?}: convex {:.0} ms, adam {:.0} ms, total {:.0} ms",
        image.dims(),
        timings.convex_ms,
        timings.adam_ms,
        timings.total_ms
    );
    Ok(RegistrationResult {
        displacement,
        warped_moving,
        convex_field,
        loss_trace: refined.trace,
        timings,
        config: cfg.clone(),
        pca_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume3 {
        let g = GridGeometry::isotropic([8, 5, 5]).unwrap();
        Volume3::from_fn(g, |i, _, _| i as f32).unwrap()
    }

    #[test]
    fn warp_identity_and_ramp_shift() {
        let v = ramp();
        let g = *v.geometry();
        assert_eq!(
            warp_volume(&v, &DisplacementField::zeros(g, Resolution::Full)).unwrap(),
            v
        );
        let u = DisplacementField::constant(g, Resolution::Full, [-1.0, 0.0, 0.0]);
        let w = warp_volume(&v, &u).unwrap();
        for i in 1..8 {
            assert_eq!(w.get(i, 2, 2), i as f32 - 1.0);
        }
        assert_eq!(w.get(0, 2, 2), 0.0);
    }

    #[test]
    fn warp_rejects_control_fields() {
        let v = ramp();
        let u = DisplacementField::zeros(*v.geometry(), Resolution::Control { stride: 2 });
        assert!(warp_volume(&v, &u).is_err());
    }

    #[test]
    fn external_features_required() {
        let v = ramp();
        let cfg = RegistrationConfig {
            feature_source: FeatureSource::External,
            ..Default::default()
        };
        assert!(matches!(
            register(&v, &v, &cfg, None),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn token_field_scaling() {
        // a constant one-token shift becomes `stride` voxels everywhere
        let tokens = GridGeometry::isotropic([4, 4, 4]).unwrap();
        let image = GridGeometry::isotropic([16, 16, 16]).unwrap();
        let u = DisplacementField::constant(tokens, Resolution::Full, [1.0, 0.0, -0.5]);
        let out = token_field_to_voxels(&u, 4, &image).unwrap();
        assert!(out.component(0).iter().all(|&x| x == 4.0));
        assert!(out.component(2).iter().all(|&x| x == -2.0));
    }
}
